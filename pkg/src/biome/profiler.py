"""Closed-form parameter, compute and memory accounting for encoder configs.

MAC convention: one multiply-add per weight per token for every dense
projection, plus the two n x n x head_dim products of attention. Softmax,
normalization and activation costs are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dsp import MEL_HOP_S, MEL_WIN_S, N_MELS, PATCH
from .encoder import PATCH_DIM, EncoderConfig

SAMPLE_RATE = 16000

# Published size, compute and 5-minute inference-memory figures, shown alongside our estimates.
PUBLISHED = {
    "Edge": {"params_m": 6, "mmacs_per_s": 227, "peak_mem_gb_5min": 1.7},
    "Small": {"params_m": 26, "mmacs_per_s": 1154, "peak_mem_gb_5min": 3.6},
    "Base": {"params_m": 76, "mmacs_per_s": 3427, "peak_mem_gb_5min": 4.3},
}


@dataclass
class ProfileReport:
    param_count: int
    mmacs_per_s: float
    peak_mem_bytes_estimate: int
    breakdown: dict = field(default_factory=dict)
    mac_breakdown: dict = field(default_factory=dict)
    n_tokens: int = 0
    audio_seconds: float = 1.0

    def to_dict(self) -> dict:
        return {
            "param_count": self.param_count,
            "mmacs_per_s": self.mmacs_per_s,
            "peak_mem_bytes_estimate": self.peak_mem_bytes_estimate,
            "n_tokens": self.n_tokens,
            "audio_seconds": self.audio_seconds,
            "breakdown": dict(self.breakdown),
            "mac_breakdown": dict(self.mac_breakdown),
        }


def param_breakdown(cfg: EncoderConfig) -> dict[str, int]:
    d, L = cfg.d_model, cfg.n_layers
    attn = d * (cfg.n_heads * cfg.head_dim) + 2 * d * cfg.kv_dim + (cfg.n_heads * cfg.head_dim) * d
    return {
        "embedding": PATCH_DIM * d + d + (d if cfg.cls_token else 0),
        "attention": L * attn,
        "mlp": L * 3 * d * cfg.mlp_hidden,
        "film": L * 2 * (cfg.msab_dim * d + d) if cfg.film else 0,
        "norms": L * 2 * d + d,
    }


def count_params(cfg: EncoderConfig) -> int:
    return sum(param_breakdown(cfg).values())


def n_tokens(cfg: EncoderConfig, audio_seconds: float, sample_rate: int = SAMPLE_RATE) -> int:
    """Tokens produced by the default mel framing and 16x16 patch grid."""
    n = int(round(audio_seconds * sample_rate))
    win = int(round(MEL_WIN_S * sample_rate))
    hop = int(round(MEL_HOP_S * sample_rate))
    frames = (n - win) // hop + 1 if n >= win else 0
    tokens = (N_MELS // PATCH) * (frames // PATCH)
    return tokens + (1 if cfg.cls_token and tokens else 0)


def mac_breakdown(cfg: EncoderConfig, audio_seconds: float) -> dict[str, int]:
    d, L, T = cfg.d_model, cfg.n_layers, n_tokens(cfg, audio_seconds)
    qo = 2 * d * cfg.n_heads * cfg.head_dim
    return {
        "embedding": T * PATCH_DIM * d,
        "attention_proj": L * T * (qo + 2 * d * cfg.kv_dim),
        "attention_mix": L * 2 * T * T * cfg.n_heads * cfg.head_dim,
        "mlp": L * T * 3 * d * cfg.mlp_hidden,
        # gamma/beta are computed once per clip, then applied per token
        "film": L * (2 * cfg.msab_dim * d + T * d) if cfg.film else 0,
    }


def count_macs(cfg: EncoderConfig, audio_seconds: float = 1.0) -> float:
    """Millions of MACs per second of 16 kHz audio for a clip of ``audio_seconds``."""
    if audio_seconds <= 0:
        raise ValueError("audio_seconds must be positive")
    return sum(mac_breakdown(cfg, audio_seconds).values()) / audio_seconds / 1e6


def estimate_peak_memory(cfg: EncoderConfig, audio_seconds: float, bytes_per_scalar: int = 4) -> int:
    """Lower-bound inference memory: weights + one layer's live activations + scores + I/O.

    Zero seconds of audio gives the weights-only figure.
    """
    weights = count_params(cfg)
    if audio_seconds <= 0:
        return weights * bytes_per_scalar
    T = n_tokens(cfg, audio_seconds)
    d = cfg.d_model
    # residual + normed input + q/k/v/attn-out + two MLP hidden streams
    layer_acts = T * (3 * d + cfg.n_heads * cfg.head_dim * 2 + 2 * cfg.kv_dim + 2 * cfg.mlp_hidden)
    scores = cfg.n_heads * T * T
    samples = int(round(audio_seconds * SAMPLE_RATE))
    frames = max(0, (samples - int(MEL_WIN_S * SAMPLE_RATE)) // int(MEL_HOP_S * SAMPLE_RATE) + 1)
    io = samples + N_MELS * frames + T * PATCH_DIM + cfg.msab_dim
    return (weights + layer_acts + scores + io) * bytes_per_scalar


def profile(cfg: EncoderConfig, audio_seconds: float = 1.0, bytes_per_scalar: int = 4) -> ProfileReport:
    return ProfileReport(
        param_count=count_params(cfg),
        mmacs_per_s=count_macs(cfg, audio_seconds),
        peak_mem_bytes_estimate=estimate_peak_memory(cfg, audio_seconds, bytes_per_scalar),
        breakdown=param_breakdown(cfg),
        mac_breakdown=mac_breakdown(cfg, audio_seconds),
        n_tokens=n_tokens(cfg, audio_seconds),
        audio_seconds=audio_seconds,
    )
