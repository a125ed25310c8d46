"""Waveform primitives: mu-law companding, normalization, WAV I/O and a
harmonic note synthesizer used as a stand-in for recorded notes."""
from __future__ import annotations

import wave
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
NOTE_SAMPLES = 64000
MU = 255
VELOCITIES = (25, 50, 75, 100, 127)
MIN_PITCH, MAX_PITCH = 21, 108


class SilentBufferError(ValueError):
    pass


def _check_finite(x: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise ValueError(f"non-finite sample at index {int(bad[0])}")


def mulaw_compand(x):
    """Continuous companding curve F(x) = sign(x) ln(1 + mu|x|) / ln(1 + mu)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)


def mulaw_encode(x) -> np.ndarray:
    """Quantize samples in [-1, 1] to 256 mu-law codes (uint8).

    Out-of-range samples are clamped and reported through a single
    ``RuntimeWarning`` carrying the number of clamped samples. Rounding is
    half-up, so 0.0 maps to code 128.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    n_clamped = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clamped:
        warnings.warn(f"mulaw_encode clamped {n_clamped} out-of-range samples", RuntimeWarning, stacklevel=2)
        x = np.clip(x, -1.0, 1.0)
    scaled = (mulaw_compand(x) + 1.0) / 2.0 * MU
    return np.floor(scaled + 0.5).astype(np.uint8)


def mulaw_decode(codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > MU):
        raise ValueError("mu-law code out of range [0, 255]")
    u = 2.0 * codes.astype(np.float64) / MU - 1.0
    return np.sign(u) * (np.power(1.0 + MU, np.abs(u)) - 1.0) / MU


def peak_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0:
        raise SilentBufferError("silent buffer")
    return x / peak


def midi_to_hz(pitch):
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69.0) / 12.0)


@dataclass(frozen=True)
class SynthNoteSpec:
    pitch: int = 60
    velocity: int = 100
    n_harmonics: int = 8
    harmonic_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside MIDI piano range [21, 108]")
        if self.velocity not in VELOCITIES:
            raise ValueError(f"velocity {self.velocity} not one of {VELOCITIES}")
        if self.n_harmonics < 1:
            raise ValueError("n_harmonics must be positive")
        if self.harmonic_decay <= 0:
            raise ValueError("harmonic_decay must be positive")


def note_envelope(n_samples: int, sample_rate: int = SAMPLE_RATE, sustain_s: float = 3.0,
                  release_tau: float = 0.25, attack_s: float = 0.005) -> np.ndarray:
    """Short linear attack, flat sustain for ``sustain_s``, then exponential release."""
    t = np.arange(n_samples) / sample_rate
    env = np.ones(n_samples)
    if attack_s > 0:
        env = np.minimum(env, t / attack_s)
    sustain = min(sustain_s, n_samples / sample_rate)
    tail = t > sustain
    env[tail] *= np.exp(-(t[tail] - sustain) / release_tau)
    return env


def synth_note(spec: SynthNoteSpec, duration_s: float = 4.0, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Additive harmonic tone at the MIDI pitch of ``spec``.

    Harmonic ``k`` has amplitude ``k**-harmonic_decay`` scaled by
    ``velocity / 127``; harmonics at or above Nyquist are dropped. The
    seed only drives the initial phase of each harmonic.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    f0 = float(midi_to_hz(spec.pitch))
    k = np.arange(1, spec.n_harmonics + 1)
    k = k[k * f0 < sample_rate / 2]
    if k.size == 0:
        raise ValueError(f"all harmonics of {f0:.1f} Hz are above Nyquist")
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(-0.1 * np.pi, 0.1 * np.pi, size=spec.n_harmonics)[: k.size]
    amps = k.astype(np.float64) ** -spec.harmonic_decay
    amps /= amps.sum()
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    tone = np.zeros(n)
    for kk, a, ph in zip(k, amps, phases):
        tone += a * np.sin(2 * np.pi * kk * f0 * t + ph)
    return tone * (spec.velocity / 127.0) * note_envelope(n, sample_rate)


def wav_write(x, path, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def wav_read(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono WAV; returns ``(samples, sample_rate)``."""
    path = Path(path)
    if path.stat().st_size == 0:
        raise ValueError(f"{path}: empty file")
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise ValueError(f"{path}: unsupported compression {w.getcomptype()}")
            if w.getsampwidth() != 2:
                raise ValueError(f"{path}: unsupported sample width {8 * w.getsampwidth()} bits")
            if w.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono, got {w.getnchannels()} channels")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed RIFF/WAVE header ({exc})") from exc
    if not raw:
        raise ValueError(f"{path}: no audio frames")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr
