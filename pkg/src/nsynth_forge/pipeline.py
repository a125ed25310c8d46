"""Training loops and end-to-end helpers shared by the command line and the
toy-scale experiments."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, LrSchedule, Tensor, no_grad
from .baseline import BaselineAutoencoder, BaselineConfig, reconstruct_audio
from .wavenet import WavenetAutoencoder, WavenetDecoderConfig, WavenetEncoderConfig


def toy_wavenet_configs(pitch_conditioning: bool = False) -> tuple[WavenetEncoderConfig, WavenetDecoderConfig]:
    """Desk-scale WaveNet autoencoder: stride-100 embedding of 8 channels, 8 decoder layers."""
    enc = WavenetEncoderConfig(layers=4, channels=16, pool_stride=100, embedding_dim=8,
                               dilation_pattern=[1, 2, 4, 8])
    dec = WavenetDecoderConfig(layers=8, residual_channels=16, skip_channels=32,
                               dilation_pattern=[1, 2, 4, 8, 16, 32, 64, 128],
                               pitch_conditioning=pitch_conditioning)
    return enc, dec


def toy_baseline_config(pitch_conditioning: bool = False) -> BaselineConfig:
    return BaselineConfig(depth=4, channels=[16, 32, 32, 64], z_dim=32, input_hw=(32, 128), fft_size=256,
                          hop_size=64, pitch_conditioning=pitch_conditioning)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order, cursor = rng.permutation(n), 0
    while True:
        if cursor + batch_size > n:
            order, cursor = rng.permutation(n), 0
        yield order[cursor: cursor + batch_size]
        cursor += batch_size


def train_wavenet(model: WavenetAutoencoder, audio: np.ndarray, pitches=None, steps: int = 250,
                  lr: float | LrSchedule = 3e-3, batch_size: int = 8, crop: int | None = None, seed: int = 0,
                  log: Callable[[str], None] | None = None, log_every: int = 50) -> list[float]:
    """Adam on minibatches of (optionally randomly cropped) waveforms.

    ``crop`` must be a multiple of the pooling stride so every crop maps to
    whole embedding steps.
    """
    audio = np.asarray(audio)
    if audio.ndim != 2 or len(audio) == 0:
        raise ValueError("audio must be a non-empty (notes, samples) array")
    stride = model.enc_cfg.pool_stride
    crop = crop or audio.shape[1] - audio.shape[1] % stride
    if crop % stride or crop > audio.shape[1]:
        raise ValueError(f"crop {crop} must be a multiple of the pool stride {stride} and fit the notes")
    pitches = None if pitches is None else np.asarray(pitches)
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    bs = min(batch_size, len(audio))
    batches = _batches(len(audio), bs, rng)
    history = []
    for step in range(steps):
        idx = next(batches)
        offs = rng.integers(0, audio.shape[1] - crop + 1, size=len(idx))
        x = np.stack([audio[i, o: o + crop] for i, o in zip(idx, offs)])
        history.append(model.train_step(x, opt, None if pitches is None else pitches[idx]))
        if log is not None and (step + 1) % log_every == 0:
            log(f"wavenet step {step + 1}/{steps} ce {history[-1]:.4f}")
    return history


def train_baseline(model: BaselineAutoencoder, grids: np.ndarray, pitches=None, steps: int = 800,
                   lr: float | LrSchedule = 2e-3, batch_size: int = 8, seed: int = 0,
                   log: Callable[[str], None] | None = None, log_every: int = 100) -> list[float]:
    grids = np.asarray(grids)
    if len(grids) < 2:
        raise ValueError("baseline training needs at least 2 examples (batch norm)")
    pitches = None if pitches is None else np.asarray(pitches)
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    batches = _batches(len(grids), max(2, min(batch_size, len(grids))), rng)
    history = []
    for step in range(steps):
        idx = next(batches)
        history.append(model.train_step(grids[idx], opt, None if pitches is None else pitches[idx]))
        if log is not None and (step + 1) % log_every == 0:
            log(f"baseline step {step + 1}/{steps} loss {history[-1]:.6f}")
    return history


def wavenet_embeddings(model: WavenetAutoencoder, audio: Sequence[np.ndarray], batch_size: int = 16) -> np.ndarray:
    """(N, Tz, E) embeddings for equal-length notes."""
    audio = np.asarray(audio, dtype=model.dtype)
    out = []
    with no_grad():
        for i in range(0, len(audio), batch_size):
            out.append(model.encode_tensor(Tensor(audio[i: i + batch_size])).data.transpose(0, 2, 1))
    return np.concatenate(out)


def wavenet_reconstruct(model: WavenetAutoencoder, audio: Sequence[np.ndarray], pitches=None, seed: int = 0,
                        mode: str = "sample") -> np.ndarray:
    """Encode then regenerate each note autoregressively (batched)."""
    audio = np.asarray(audio)
    z = wavenet_embeddings(model, audio)
    n = audio.shape[1] - audio.shape[1] % model.enc_cfg.pool_stride
    out = model.sample(z, n_samples=n, pitch=None if pitches is None else list(pitches), seed=seed, mode=mode)
    full = np.zeros(audio.shape)
    full[:, :n] = out
    return full


def baseline_reconstruct(model: BaselineAutoencoder, audio: Sequence[np.ndarray], pitches=None,
                         gl_iters: int = 200, seed: int = 0) -> np.ndarray:
    """Magnitude round trip through the autoencoder, phase from Griffin-Lim."""
    out = []
    for i, x in enumerate(audio):
        grid, M = model.prepare_audio(x)
        rec = model.reconstruct(grid, None if pitches is None else pitches[i], like=M)
        y = reconstruct_audio(rec, gl_iters=gl_iters, seed=seed)
        out.append(y[: len(x)])
    return np.stack(out)


def teacher_forced_ce(model: WavenetAutoencoder, audio: np.ndarray, z: np.ndarray, pitches=None) -> float:
    """Mean CE of ``audio`` decoded from embeddings ``z`` of shape (N, E, Tz)."""
    with no_grad():
        return model.loss(np.asarray(audio), pitches, z_override=z).item()
