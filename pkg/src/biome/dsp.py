"""Audio front-end: resampling, log-mel spectrograms, 16x16 patches and
modulation-spectrum (MSAB) side-channel features.

Everything here is a pure numpy function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

PATCH = 16
LOG_EPS = 1e-10

# Mel front-end defaults: 25 ms Hann window, 10 ms hop.
N_MELS = 128
MEL_WIN_S = 0.025
MEL_HOP_S = 0.010

# Modulation front-end defaults.
MOD_WIN_S = 0.032
MOD_HOP_S = 0.008
MSAB_NFFT = 256


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {x.shape}")
        if x.size == 0:
            raise ValueError("AudioClip is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioClip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    frame_hop: float

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchSequence:
    patches: np.ndarray  # [n_patches, 256], time-major
    grid_shape: tuple[int, int]  # (freq_patches, time_patches)

    def __len__(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class ModulationSpectrogram:
    values: np.ndarray  # [n_acoustic_bins, n_mod_bins]
    acoustic_bin_hz: float
    mod_bin_hz: float
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MSABVector:
    values: np.ndarray

    def __len__(self) -> int:
        return self.values.size


def read_wav(path) -> AudioClip:
    """Load PCM16 / float32 WAV; stereo files contribute their first channel."""
    rate, data = wavfile.read(path)
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    return AudioClip(x, rate)


def write_wav(path, clip: AudioClip, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_rate), clip.sample_rate)
    y = sps.resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(y, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int, f_min: float = 0.0, f_max=None) -> np.ndarray:
    f_max = sample_rate / 2 if f_max is None else f_max
    pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float = 0.0, f_max=None) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape [n_mels, n_fft // 2 + 1]."""
    f_max = sample_rate / 2 if f_max is None else f_max
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft_magnitude(x: np.ndarray, win: int, hop: int, n_fft: int) -> np.ndarray:
    """|STFT| with a periodic Hann window, only frames fully inside ``x``. Shape [n_frames, n_fft//2+1]."""
    if win > n_fft:
        raise ValueError(f"window ({win}) longer than FFT size ({n_fft})")
    window = sps.get_window("hann", win, fftbins=True)
    frames = _frames(x, win, hop) * window
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def mel_spectrogram(
    clip: AudioClip,
    n_mels: int = N_MELS,
    win_len: float = MEL_WIN_S,
    hop: float = MEL_HOP_S,
    eps: float = LOG_EPS,
) -> MelSpectrogram:
    """Log-mel energies ``log(power + eps)``; frames = floor((len - win) / hop) + 1."""
    if not win_len >= hop > 0:
        raise ValueError(f"need win_len >= hop > 0, got win_len={win_len}, hop={hop}")
    win = int(round(win_len * clip.sample_rate))
    hop_n = int(round(hop * clip.sample_rate))
    if clip.samples.size < win:
        raise ValueError(f"clip of {clip.samples.size} samples is shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    power = stft_magnitude(clip.samples, win, hop_n, n_fft) ** 2
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    return MelSpectrogram(np.log(fb @ power.T + eps), hop_n / clip.sample_rate)


def patchify(mel: MelSpectrogram) -> PatchSequence:
    """Cut a mel spectrogram into non-overlapping 16x16 blocks, dropping remainders.

    Patches are ordered time-major: every frequency block of frame-block 0,
    then frame-block 1, and so on. Each block is flattened row-major
    (frequency, time).
    """
    values = np.asarray(mel.values)
    n_mels, n_frames = values.shape
    fp, tp = n_mels // PATCH, n_frames // PATCH
    if fp == 0 or tp == 0:
        raise ValueError(f"mel of shape {values.shape} is smaller than one {PATCH}x{PATCH} patch")
    blocks = values[: fp * PATCH, : tp * PATCH].reshape(fp, PATCH, tp, PATCH)
    patches = blocks.transpose(2, 0, 1, 3).reshape(tp * fp, PATCH * PATCH)
    return PatchSequence(patches, (fp, tp))


def modulation_spectrogram(
    clip: AudioClip,
    nfft_acoustic: int = 2 * MSAB_NFFT,
    nfft_mod: int = 2 * MSAB_NFFT,
    win_len: float = MOD_WIN_S,
    hop: float = MOD_HOP_S,
) -> ModulationSpectrogram:
    """Two-stage modulation spectrum |FFT_t |STFT(x)|| on the raw waveform.

    Rows are acoustic frequencies (nfft_acoustic // 2 + 1), columns are
    non-negative modulation frequencies (nfft_mod // 2 + 1). Utterances with
    more than ``nfft_mod`` frames are split into consecutive blocks whose
    magnitude spectra are averaged (a trailing partial block is dropped);
    shorter ones are zero-padded and flagged with ``metadata["padded"]``.
    """
    x = clip.samples
    sr = clip.sample_rate
    win = min(int(round(win_len * sr)), nfft_acoustic)
    hop_n = max(1, int(round(hop * sr)))
    padded_signal = x.size < win
    if padded_signal:
        x = np.pad(x, (0, win - x.size))
    spec = stft_magnitude(x, win, hop_n, nfft_acoustic).T  # [f, t]
    n_frames = spec.shape[1]
    if n_frames >= nfft_mod:
        n_blocks = n_frames // nfft_mod
        blocks = spec[:, : n_blocks * nfft_mod].reshape(spec.shape[0], n_blocks, nfft_mod)
        mod = np.abs(np.fft.rfft(blocks, axis=2)).mean(axis=1)
        padded = padded_signal
    else:
        mod = np.abs(np.fft.rfft(spec, n=nfft_mod, axis=1))
        padded = True
    frame_rate = sr / hop_n
    meta = {"padded": bool(padded), "n_frames": int(n_frames), "win": win, "hop": hop_n}
    return ModulationSpectrogram(mod, sr / nfft_acoustic, frame_rate / nfft_mod, meta)


def msab(modspec: ModulationSpectrogram) -> MSABVector:
    """Concatenate row means and column means of log1p(|modspec|)."""
    values = np.asarray(modspec.values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty modulation spectrogram")
    comp = np.log1p(values)
    return MSABVector(np.concatenate([comp.mean(axis=1), comp.mean(axis=0)]))


def msab_features(clip: AudioClip, nfft: int = MSAB_NFFT) -> MSABVector:
    """MSAB vector of length ``2 * nfft`` (512 for the default NFFT of 256).

    The modulation spectrum is taken with FFTs of size ``2 * nfft`` and the
    Nyquist row and column are dropped, giving an ``nfft x nfft`` map.
    """
    ms = modulation_spectrogram(clip, 2 * nfft, 2 * nfft)
    square = ModulationSpectrogram(ms.values[:nfft, :nfft], ms.acoustic_bin_hz, ms.mod_bin_hz, ms.metadata)
    return msab(square)


def fix_length(clip: AudioClip, seconds: float) -> AudioClip:
    """Crop or zero-pad the tail to exactly ``seconds``."""
    n = int(round(seconds * clip.sample_rate))
    x = clip.samples[:n]
    if x.size < n:
        x = np.pad(x, (0, n - x.size))
    return AudioClip(x, clip.sample_rate)
