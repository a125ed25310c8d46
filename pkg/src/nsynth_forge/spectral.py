"""STFT analysis/synthesis, log-power magnitudes, perceptual loss weighting,
Griffin-Lim phase reconstruction and phase-based representations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .autodiff import Tensor
from .dsp import SAMPLE_RATE

EPS = 1e-10
FLOOR_DB = 100.0


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop_size: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a positive power of two")
        if not 0 < self.hop_size <= self.fft_size:
            raise ValueError("hop_size must be in (0, fft_size]")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return scipy.signal.get_window("hann", self.fft_size, fftbins=True)

    def bin_frequencies(self, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        return np.arange(self.n_bins) * sample_rate / self.fft_size


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (n_frames, n_bins) complex
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None


@dataclass
class MagnitudePlane:
    """Magnitudes on a (frames, bins) grid.

    ``scale`` is ``"log_power"`` (peak-normalized to [0, 1], invertible via
    ``peak``/``floor``) or ``"linear"``.
    """

    values: np.ndarray
    scale: str = "linear"
    peak: float | None = None
    floor: float | None = None
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None


def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = -(-len(x) // cfg.hop_size)
    padded = np.zeros((n_frames - 1) * cfg.hop_size + cfg.fft_size, dtype=x.dtype)
    padded[: len(x)] = x
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop_size * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(x, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Frame ``f`` covers samples ``[f*hop, f*hop + fft_size)``; the tail is zero padded."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < cfg.fft_size:
        raise ValueError(f"buffer of {len(x)} samples is shorter than one frame ({cfg.fft_size})")
    frames = _frame(x, cfg) * cfg.window_array()
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1), cfg, len(x))


def _window_sum(cfg: StftConfig, n_frames: int) -> np.ndarray:
    w2 = cfg.window_array() ** 2
    total = np.zeros((n_frames - 1) * cfg.hop_size + cfg.fft_size)
    for f in range(n_frames):
        total[f * cfg.hop_size: f * cfg.hop_size + cfg.fft_size] += w2
    return total


def istft(S: ComplexSpectrogram, length: int | None = None, floor: float = 0.0) -> np.ndarray:
    """Least-squares inverse: windowed overlap-add divided by the summed squared window.

    Samples no frame sees (zero window weight) come back as zero. A positive
    ``floor`` bounds the divisor below by ``floor`` times its largest value,
    which tames the barely-windowed edge samples of an inconsistent
    spectrogram; the default keeps the exact inverse.
    """
    cfg = S.config
    frames = np.asarray(S.frames)
    if frames.ndim != 2 or frames.shape[1] != cfg.n_bins:
        raise ValueError(f"expected (frames, {cfg.n_bins}) spectrogram, got {frames.shape}")
    n_frames = frames.shape[0]
    if n_frames == 0:
        raise ValueError("spectrogram has no frames")
    segs = np.fft.irfft(frames, n=cfg.fft_size, axis=1) * cfg.window_array()
    out = np.zeros((n_frames - 1) * cfg.hop_size + cfg.fft_size)
    for f in range(n_frames):
        out[f * cfg.hop_size: f * cfg.hop_size + cfg.fft_size] += segs[f]
    wsum = _window_sum(cfg, n_frames)
    nz = wsum > 1e-10
    if floor > 0:
        wsum = np.maximum(wsum, floor * wsum.max())
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    length = length if length is not None else S.length
    if length is not None:
        out = out[:length] if length <= len(out) else np.pad(out, (0, length - len(out)))
    return out


def log_power_magnitude(S: ComplexSpectrogram) -> MagnitudePlane:
    """log(|S|^2 + eps), floored 100 dB under the peak and mapped to [0, 1]."""
    power = np.abs(S.frames) ** 2
    if not np.any(power > 0):
        raise ValueError("all-zero spectrogram")
    logp = np.log(power + EPS)
    peak = float(logp.max())
    floor = peak - FLOOR_DB * np.log(10.0) / 10.0
    values = np.clip((logp - floor) / (peak - floor), 0.0, 1.0)
    return MagnitudePlane(values, "log_power", peak, floor, S.config, S.length)


def magnitude_to_linear(M: MagnitudePlane) -> MagnitudePlane:
    if M.scale == "linear":
        return M
    if M.peak is None or M.floor is None:
        raise ValueError("log-power plane lacks peak/floor metadata")
    logp = np.asarray(M.values) * (M.peak - M.floor) + M.floor
    mag = np.sqrt(np.maximum(np.exp(logp) - EPS, 0.0))
    return MagnitudePlane(mag, "linear", None, None, M.config, M.length)


def perceptual_weight(freq_hz):
    """Loss weight falling linearly from 10 at 0 Hz to 1 at 4 kHz, flat above."""
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("negative frequency")
    w = 10.0 - 9.0 * np.minimum(f, 4000.0) / 4000.0
    return float(w) if w.ndim == 0 else w


def bin_weights(n_bins: int, fft_size: int | None = None, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Perceptual weights for ``n_bins`` consecutive rfft bins starting at DC."""
    fft_size = fft_size if fft_size is not None else 2 * (n_bins - 1)
    return perceptual_weight(np.arange(n_bins) * sample_rate / fft_size)


def weighted_mse(pred, target, weights) -> Tensor:
    """Mean over all cells of ``weights * (pred - target)**2``.

    ``weights`` broadcasts along the last (frequency) axis. ``pred`` may be
    a Tensor, in which case the result carries its gradient.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    w = np.asarray(weights, dtype=pred.data.dtype)
    diff = pred - Tensor(target.astype(pred.data.dtype))
    return (diff * diff * Tensor(np.broadcast_to(w, pred.shape).copy())).mean()


def consistency_error(X: np.ndarray, M: np.ndarray) -> float:
    """Distance between ``|X|`` and ``M`` over the two-sided spectrum.

    Interior rfft bins are counted twice (their mirrored negative-frequency
    twins), which is the norm in which Griffin-Lim is a descent method.
    """
    d2 = (np.abs(X) - M) ** 2
    d2[:, 1:-1] *= 2.0
    return float(np.sqrt(d2.sum()))


# overlap-weight floor for the waveform Griffin-Lim hands back (see griffin_lim)
GL_OUTPUT_FLOOR = 0.1


def griffin_lim(M: MagnitudePlane, iters: int = 1000, seed: int = 0,
                length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Recover a waveform whose STFT magnitude approximates ``M``.

    Starts from uniformly random phase drawn from ``seed``. Returns the final
    waveform and the consistency error of each iterate; the trace is
    non-increasing up to rounding. Iterates use the exact inverse; the
    returned waveform floors the overlap weight at ``GL_OUTPUT_FLOOR`` of its
    peak, so the first samples under the window's zero stay bounded.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    M = magnitude_to_linear(M)
    mag = np.asarray(M.values, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise ValueError("non-finite magnitudes")
    cfg = M.config
    length = length or M.length or (mag.shape[0] * cfg.hop_size)
    rng = np.random.default_rng(seed)
    phase = np.exp(1j * rng.uniform(-np.pi, np.pi, size=mag.shape))
    phase[:, 0] = np.sign(phase[:, 0].real) + 0j
    if cfg.fft_size % 2 == 0:
        phase[:, -1] = np.sign(phase[:, -1].real) + 0j
    x = istft(ComplexSpectrogram(mag * phase, cfg, length), length)
    errors = np.empty(iters)
    for k in range(iters):
        X = stft(x, cfg).frames
        errors[k] = consistency_error(X, mag)
        Y = ComplexSpectrogram(mag * np.exp(1j * np.angle(X)), cfg, length)
        x = istft(Y, length)
    return istft(Y, length, floor=GL_OUTPUT_FLOOR), errors


def phase_plane(S: ComplexSpectrogram) -> np.ndarray:
    """Raw phase in units of pi, in [-1, 1)."""
    return wrap_unit(np.angle(S.frames) / np.pi)


def wrap_unit(v):
    """Wrap values measured in units of pi into [-1, 1)."""
    return np.mod(np.asarray(v) + 1.0, 2.0) - 1.0


def _check_phase(x: np.ndarray, name: str) -> None:
    if np.any(x < -1.0) or np.any(x >= 1.0):
        raise ValueError(f"{name} phase values outside [-1, 1)")


def circular_phase_loss(pred, target) -> Tensor:
    """mean(1 - cos(pi * (pred - target))) on phases expressed in units of pi."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    _check_phase(pred.data, "pred")
    _check_phase(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (1.0 - ((pred - Tensor(target)) * np.pi).cos()).mean()


def phase_difference(phase: np.ndarray, bin_advance: np.ndarray | None = None) -> np.ndarray:
    """Frame-to-frame derivative of unwrapped phase (units of pi) along axis 0.

    ``bin_advance`` is the per-hop rotation of each bin's own centre
    frequency (units of pi); subtracting it leaves the deviation of the
    signal from the bin centre. The first row keeps the raw phase.
    """
    unwrapped = np.unwrap(phase * np.pi, axis=0) / np.pi
    d = np.diff(unwrapped, axis=0)
    if bin_advance is not None:
        d = d - bin_advance
    out = np.empty_like(phase)
    out[0] = phase[0]
    out[1:] = d
    return wrap_unit(out)


def instantaneous_frequency(S: ComplexSpectrogram) -> np.ndarray:
    """Per-bin phase advance per hop relative to the bin centre, in [-1, 1).

    A value ``v`` means the signal runs ``v/2`` cycles per hop ahead of the
    bin centre frequency, i.e. ``(f_signal - f_bin) * hop / sample_rate``
    cycles.
    """
    if S.frames.shape[0] < 2:
        raise ValueError("instantaneous frequency needs at least two frames")
    cfg = S.config
    advance = 2.0 * np.arange(cfg.n_bins) * cfg.hop_size / cfg.fft_size
    return phase_difference(phase_plane(S), advance)


def assemble_from_phase(M: MagnitudePlane, phase: np.ndarray, length: int | None = None) -> np.ndarray:
    """Synthesize audio from magnitudes and a raw phase plane (units of pi)."""
    mag = magnitude_to_linear(M).values
    S = ComplexSpectrogram(mag * np.exp(1j * np.pi * np.asarray(phase)), M.config, length or M.length)
    return istft(S)


def assemble_from_if(M: MagnitudePlane, inst_freq: np.ndarray, length: int | None = None) -> np.ndarray:
    """Synthesize audio from magnitudes and an instantaneous-frequency plane."""
    cfg = M.config
    advance = 2.0 * np.arange(cfg.n_bins) * cfg.hop_size / cfg.fft_size
    inst_freq = np.asarray(inst_freq)
    steps = inst_freq.copy()
    steps[1:] += advance
    phase = np.cumsum(steps, axis=0)
    return assemble_from_phase(M, wrap_unit(phase), length)
