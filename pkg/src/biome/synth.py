"""Synthetic audio for desk-scale training and probing."""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .dsp import AudioClip

SR = 16000


def tone(freq: float, seconds: float, sr: int = SR, amp: float = 0.5, phase: float = 0.0) -> AudioClip:
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def am_tone(carrier: float, mod_rate: float, seconds: float, sr: int = SR, depth: float = 1.0, amp: float = 0.5,
            phase: float = 0.0) -> AudioClip:
    """Carrier at ``carrier`` Hz with a sinusoidal envelope at ``mod_rate`` Hz."""
    t = np.arange(int(round(seconds * sr))) / sr
    env = 1.0 + depth * np.sin(2 * np.pi * mod_rate * t)
    return AudioClip(amp * env / (1.0 + depth) * np.sin(2 * np.pi * carrier * t + phase), sr)


def band_noise(lo: float, hi: float, seconds: float, rng: np.random.Generator, sr: int = SR,
               amp: float = 0.3) -> AudioClip:
    x = rng.standard_normal(int(round(seconds * sr)))
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    y = sps.sosfilt(sos, x)
    return AudioClip(amp * y / (np.max(np.abs(y)) + 1e-12), sr)


def random_clip(rng: np.random.Generator, seconds: float = 2.0, sr: int = SR) -> AudioClip:
    """One of: pure tone, AM tone, band-limited noise; plus a little white noise."""
    kind = rng.integers(3)
    if kind == 0:
        clip = tone(rng.uniform(200, 6000), seconds, sr, amp=rng.uniform(0.1, 0.6), phase=rng.uniform(0, 2 * np.pi))
    elif kind == 1:
        clip = am_tone(rng.uniform(300, 6000), rng.uniform(2, 40), seconds, sr, depth=rng.uniform(0.3, 1.0),
                       amp=rng.uniform(0.1, 0.6), phase=rng.uniform(0, 2 * np.pi))
    else:
        lo = rng.uniform(100, 5000)
        clip = band_noise(lo, min(lo * rng.uniform(1.2, 3.0), 7800), seconds, rng, sr)
    noise = 0.005 * rng.standard_normal(clip.samples.size)
    return AudioClip(clip.samples + noise, sr)


def am_rate_task(n_per_class: int, rates=(4.0, 12.0, 30.0), seconds: float = 2.0, seed: int = 0, sr: int = SR):
    """Class-conditional clips that differ only in AM rate; carrier is random per clip."""
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for label, rate in enumerate(rates):
        for _ in range(n_per_class):
            c = am_tone(rng.uniform(500, 4000), rate, seconds, sr, depth=1.0, amp=rng.uniform(0.2, 0.6),
                        phase=rng.uniform(0, 2 * np.pi))
            clips.append(AudioClip(c.samples + 0.01 * rng.standard_normal(c.samples.size), sr))
            labels.append(label)
    return clips, np.asarray(labels)
