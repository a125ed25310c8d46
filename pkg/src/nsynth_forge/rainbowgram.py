"""Constant-Q transform and rainbowgram rendering.

A rainbowgram is a CQT with intensity from the log power and colour from
the frame-to-frame phase advance of each bin, so harmonics that sit off a
bin centre show up as steady colours and pitch motion as colour change.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dsp import SAMPLE_RATE
from .spectral import EPS, FLOOR_DB, wrap_unit


@dataclass(frozen=True)
class CqtConfig:
    min_pitch: int = 24
    max_pitch: int = 96
    bins_per_octave: int = 40
    hop_size: int = 256
    filter_scale: float = 0.8
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.min_pitch < self.max_pitch:
            raise ValueError("min_pitch must be below max_pitch")
        if self.bins_per_octave < 1 or self.hop_size < 1 or self.filter_scale <= 0:
            raise ValueError("bins_per_octave, hop_size and filter_scale must be positive")

    @property
    def n_bins(self) -> int:
        return (self.max_pitch - self.min_pitch) * self.bins_per_octave // 12

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_frequencies(self) -> np.ndarray:
        b = np.arange(self.n_bins)
        return 440.0 * 2.0 ** ((self.min_pitch + 12.0 * b / self.bins_per_octave - 69.0) / 12.0)

    def kernel_lengths(self) -> np.ndarray:
        return np.ceil(self.filter_scale * self.q * self.sample_rate / self.center_frequencies()).astype(int)

    def bin_of_pitch(self, pitch: float) -> int:
        return int(round((pitch - self.min_pitch) * self.bins_per_octave / 12.0))


@dataclass
class Rainbowgram:
    magnitude: np.ndarray  # (F, B) in [0, 1]
    hue: np.ndarray  # (F, B) in [-1, 1)
    config: CqtConfig

    def __post_init__(self):
        if self.magnitude.shape != self.hue.shape:
            raise ValueError("magnitude and hue shapes differ")


def _kernel(f_b: float, length: int, sr: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets (centred on the frame time) and the analysis kernel for one bin."""
    offsets = np.arange(length) - length // 2
    w = np.hanning(length + 2)[1:-1]  # no zero endpoints
    return offsets, w * np.exp(-2j * np.pi * f_b * offsets / sr) / w.sum()


def cqt(x, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Complex CQT of shape (frames, bins); frame ``f`` is centred on sample ``f * hop``.

    Each bin is a Hann-windowed complex exponential inner product, with phase
    referenced to absolute time so a tone exactly on a bin centre has
    constant phase across frames. A unit sinusoid on a bin centre has
    magnitude 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("cqt expects a mono 1-D signal")
    lengths = cfg.kernel_lengths()
    if lengths.max() > x.size:
        raise ValueError(f"lowest-frequency kernel ({lengths.max()} samples) is longer than the signal ({x.size})")
    n_frames = -(-x.size // cfg.hop_size)
    half = int(lengths.max())
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + cfg.hop_size)])
    t = np.arange(n_frames) * cfg.hop_size
    out = np.empty((n_frames, cfg.n_bins), dtype=np.complex128)
    for b, (f_b, n) in enumerate(zip(cfg.center_frequencies(), lengths)):
        offsets, k = _kernel(f_b, int(n), cfg.sample_rate)
        start = half + offsets[0]
        frames = np.lib.stride_tricks.as_strided(
            padded[start:], shape=(n_frames, n), strides=(cfg.hop_size * padded.strides[0], padded.strides[0]))
        kr = np.ascontiguousarray(np.stack([k.real, k.imag], axis=1))
        ri = frames @ kr
        out[:, b] = (ri[:, 0] + 1j * ri[:, 1]) * np.exp(-2j * np.pi * f_b * t / cfg.sample_rate)
    return out


def render_rainbowgram(x, cfg: CqtConfig = CqtConfig()) -> Rainbowgram:
    C = cqt(x, cfg)
    power = np.abs(C) ** 2
    if np.any(power > 0):
        logp = np.log(power + EPS)
        peak = float(logp.max())
        floor = peak - FLOOR_DB * np.log(10.0) / 10.0
        mag = np.clip((logp - floor) / (peak - floor), 0.0, 1.0)
    else:
        mag = np.zeros(power.shape)
    phase = np.unwrap(np.angle(C), axis=0)
    dphi = np.diff(phase, axis=0, prepend=phase[:1])
    hue = wrap_unit(dphi / np.pi)
    return Rainbowgram(mag, hue, cfg)


# red, yellow, green, cyan, blue, magenta; wraps back to red
_ANCHORS = np.array([[255, 0, 0], [255, 255, 0], [0, 255, 0], [0, 255, 255], [0, 0, 255], [255, 0, 255]],
                    dtype=np.float64)


def hue_to_rgb(hue: np.ndarray) -> np.ndarray:
    """Cyclic six-anchor rainbow; hue in [-1, 1) maps once around the circle."""
    pos = (np.asarray(hue, dtype=np.float64) + 1.0) / 2.0 * len(_ANCHORS)
    i0 = np.floor(pos).astype(int) % len(_ANCHORS)
    i1 = (i0 + 1) % len(_ANCHORS)
    frac = (pos - np.floor(pos))[..., None]
    return _ANCHORS[i0] * (1.0 - frac) + _ANCHORS[i1] * frac


def rainbowgram_image(r: Rainbowgram) -> np.ndarray:
    """uint8 RGB array of shape (bins, frames, 3), low frequencies in the bottom row."""
    rgb = hue_to_rgb(r.hue) * r.magnitude[..., None]
    img = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(img.transpose(1, 0, 2)[::-1])


def rainbowgram_to_image(r: Rainbowgram, path) -> Path:
    path = Path(path)
    Image.fromarray(rainbowgram_image(r)).save(path, format="PNG", optimize=False, compress_level=6)
    return path
