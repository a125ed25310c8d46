"""Spectral convolutional autoencoder: strided 4x4 convs with batch norm and
leaky ReLU down to a single bottleneck vector, a mirrored transpose-conv
decoder, and Griffin-Lim to get back to audio."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (Adam, BatchNormState, Tensor, batch_norm, concat, conv2d, conv2d_transpose, dense,
                       init_uniform, no_grad, read_checkpoint, write_checkpoint)
from .dsp import SAMPLE_RATE
from .spectral import (ComplexSpectrogram, MagnitudePlane, StftConfig, bin_weights, griffin_lim,
                       instantaneous_frequency, log_power_magnitude, phase_plane, stft, weighted_mse)
from .wavenet import N_PITCHES, pitch_onehot

Z_SIZES = (1984, 1024, 512, 256, 128, 64)
REPRESENTATIONS = {"magnitude": 1, "phase": 2, "if": 2, "real_imag": 2}


def channel_schedule(depth: int, start: int = 128, stop: int = 1024) -> list[int]:
    """Channels double every second layer from ``start``, capped at ``stop``."""
    return [min(start * 2 ** (i // 2), stop) for i in range(depth)]


@dataclass
class BaselineConfig:
    depth: int = 10
    kernel: int = 4
    stride: int = 2
    channels: list[int] | None = None
    z_dim: int = 1984
    leaky_slope: float = 0.1
    pitch_conditioning: bool = False
    input_hw: tuple[int, int] = (256, 512)
    fft_size: int = 1024
    hop_size: int = 256
    representation: str = "magnitude"

    def __post_init__(self):
        if self.channels is None:
            self.channels = channel_schedule(self.depth)
        self.channels = list(self.channels)
        self.input_hw = tuple(self.input_hw)
        if len(self.channels) != self.depth:
            raise ValueError("channels must list one entry per layer")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def in_channels(self) -> int:
        return REPRESENTATIONS[self.representation]

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Grid size before each layer and after the last one."""
        sizes = [self.input_hw]
        for _ in range(self.depth):
            h, w = sizes[-1]
            sizes.append((-(-h // self.stride), -(-w // self.stride)))
        return sizes

    @property
    def flat_dim(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return self.channels[-1] * h * w


class ConvEncoderStack:
    """conv(stride 2) -> batch norm -> leaky ReLU, repeated; shared with the classifier."""

    def __init__(self, cfg: BaselineConfig, params: dict, bn: dict, rng, prefix: str, dtype):
        self.cfg, self.params, self.bn, self.prefix = cfg, params, bn, prefix
        k = cfg.kernel
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.channels):
            params[f"{prefix}.{i}.w"] = init_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
            params[f"{prefix}.{i}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
            params[f"{prefix}.{i}.gamma"] = Tensor(np.ones(cout, dtype), requires_grad=True)
            params[f"{prefix}.{i}.beta"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
            bn[f"{prefix}.{i}"] = BatchNormState(cout, dtype)
            cin = cout

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        p, s = self.params, self.cfg.stride
        for i in range(self.cfg.depth):
            x = conv2d(x, p[f"{self.prefix}.{i}.w"], p[f"{self.prefix}.{i}.b"], stride=(s, s))
            x = batch_norm(x, p[f"{self.prefix}.{i}.gamma"], p[f"{self.prefix}.{i}.beta"],
                           self.bn[f"{self.prefix}.{i}"], training=training)
            x = x.leaky_relu(self.cfg.leaky_slope)
        return x.reshape(x.shape[0], -1)


def to_grid(values: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Crop or zero-pad a (frames, bins, ...) plane to ``hw``; excess bins (e.g. Nyquist) are dropped."""
    out = np.zeros(tuple(hw) + values.shape[2:], dtype=values.dtype)
    h, w = min(hw[0], values.shape[0]), min(hw[1], values.shape[1])
    out[:h, :w] = values[:h, :w]
    return out


def from_grid(values: np.ndarray, frames: int, bins: int) -> np.ndarray:
    out = np.zeros((frames, bins) + values.shape[2:], dtype=values.dtype)
    h, w = min(frames, values.shape[0]), min(bins, values.shape[1])
    out[:h, :w] = values[:h, :w]
    return out


class BaselineAutoencoder:
    def __init__(self, cfg: BaselineConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or BaselineConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        c = self.cfg
        self.encoder = ConvEncoderStack(c, self.params, self.bn, rng, "enc", self.dtype)
        self.params["enc.fc.w"] = init_uniform(rng, (c.flat_dim, c.z_dim), c.flat_dim, self.dtype)
        self.params["enc.fc.b"] = Tensor(np.zeros(c.z_dim, self.dtype), requires_grad=True)
        zin = c.z_dim + (N_PITCHES if c.pitch_conditioning else 0)
        self.params["dec.fc.w"] = init_uniform(rng, (zin, c.flat_dim), zin, self.dtype)
        self.params["dec.fc.b"] = Tensor(np.zeros(c.flat_dim, self.dtype), requires_grad=True)
        k = c.kernel
        outs = list(reversed(c.channels[:-1])) + [c.in_channels]
        cin = c.channels[-1]
        for i, cout in enumerate(outs):
            last = i == c.depth - 1
            w = init_uniform(rng, (cin, cout, k, k), cin * k * k, self.dtype)
            if last:
                w.data[...] = 0.0
            self.params[f"dec.{i}.w"] = w
            self.params[f"dec.{i}.b"] = Tensor(np.full(cout, 0.5 if last else 0.0, self.dtype), requires_grad=True)
            if not last:
                self.params[f"dec.{i}.gamma"] = Tensor(np.ones(cout, self.dtype), requires_grad=True)
                self.params[f"dec.{i}.beta"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)
                self.bn[f"dec.{i}"] = BatchNormState(cout, self.dtype)
            cin = cout

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # representation
    def prepare(self, S: ComplexSpectrogram) -> tuple[np.ndarray, MagnitudePlane]:
        """Model input grid (channels, H, W) for one spectrogram, plus its log-power plane."""
        M = log_power_magnitude(S)
        planes = [M.values]
        rep = self.cfg.representation
        if rep == "phase":
            planes.append(phase_plane(S))
        elif rep == "if":
            planes.append(instantaneous_frequency(S))
        elif rep == "real_imag":
            scale = np.abs(S.frames).max()
            planes = [S.frames.real / scale, S.frames.imag / scale]
        grid = np.stack([to_grid(p, self.cfg.input_hw) for p in planes]).astype(self.dtype)
        return grid, M

    def prepare_audio(self, x) -> tuple[np.ndarray, MagnitudePlane]:
        return self.prepare(stft(x, StftConfig(self.cfg.fft_size, self.cfg.hop_size)))

    # network
    def encode_tensor(self, x: Tensor, training: bool = False) -> Tensor:
        c = self.cfg
        if tuple(x.shape[1:]) != (c.in_channels,) + c.input_hw:
            raise ValueError(f"expected input grid {(c.in_channels,) + c.input_hw}, got {x.shape[1:]}")
        h = self.encoder(x, training)
        return dense(h, self.params["enc.fc.w"], self.params["enc.fc.b"])

    def decode_tensor(self, z: Tensor, pitches=None, training: bool = False) -> Tensor:
        c = self.cfg
        p = self.params
        if z.shape[1] != c.z_dim:
            raise ValueError(f"code has {z.shape[1]} dims, model expects {c.z_dim}")
        if c.pitch_conditioning:
            if pitches is None:
                raise ValueError("pitch-conditioned decoder needs pitches")
            z = concat([z, Tensor(pitch_onehot(pitches, dtype=self.dtype))], axis=1)
        sizes = c.spatial_sizes()
        h0, w0 = sizes[-1]
        x = dense(z, p["dec.fc.w"], p["dec.fc.b"]).reshape(z.shape[0], c.channels[-1], h0, w0)
        for i in range(c.depth):
            target = sizes[c.depth - 1 - i]
            x = conv2d_transpose(x, p[f"dec.{i}.w"], p[f"dec.{i}.b"], stride=(c.stride, c.stride), out_hw=target)
            if i < c.depth - 1:
                x = batch_norm(x, p[f"dec.{i}.gamma"], p[f"dec.{i}.beta"], self.bn[f"dec.{i}"], training=training)
                x = x.leaky_relu(c.leaky_slope)
        if c.representation == "magnitude":
            return x.clip(0.0, 1.0)
        mag = x[:, :1].clip(0.0, 1.0)
        return concat([mag, x[:, 1:]], axis=1)

    def encode(self, M) -> np.ndarray:
        """Bottleneck code (z_dim,) for one input grid or MagnitudePlane (eval mode)."""
        grid = self._as_grid(M)
        with no_grad():
            return self.encode_tensor(Tensor(grid[None]), training=False).data[0].copy()

    def _as_grid(self, M) -> np.ndarray:
        if isinstance(M, MagnitudePlane):
            vals = to_grid(np.asarray(M.values, dtype=self.dtype), self.cfg.input_hw)[None]
        else:
            vals = np.asarray(M, dtype=self.dtype)
            if vals.ndim == 2:
                vals = vals[None]
        return vals

    def decode(self, z, pitch=None, like: MagnitudePlane | None = None) -> MagnitudePlane:
        """Magnitude plane decoded from one code; ``like`` supplies the original
        frame/bin counts and normalization metadata."""
        z = np.asarray(z, dtype=self.dtype)
        if z.shape != (self.cfg.z_dim,):
            raise ValueError(f"code has shape {z.shape}, model expects ({self.cfg.z_dim},)")
        with no_grad():
            out = self.decode_tensor(Tensor(z[None]), None if pitch is None else [pitch], training=False).data[0, 0]
        if like is None:
            return MagnitudePlane(out, "log_power", 0.0, -23.025850929940457,
                                  StftConfig(self.cfg.fft_size, self.cfg.hop_size))
        vals = from_grid(out, *like.values.shape)
        return MagnitudePlane(vals, "log_power", like.peak, like.floor, like.config, like.length)

    def loss_tensor(self, pred: Tensor, target: np.ndarray) -> Tensor:
        c = self.cfg
        w = bin_weights(c.input_hw[1], c.fft_size)
        if c.representation == "magnitude":
            return weighted_mse(pred, target, w)
        mag = weighted_mse(pred[:, :1], target[:, :1], w)
        if c.representation == "phase":
            diff = (pred[:, 1:] - Tensor(target[:, 1:])) * np.pi
            return mag + (1.0 - diff.cos()).mean()
        rest = pred[:, 1:] - Tensor(target[:, 1:])
        return mag + (rest * rest).mean()

    def loss(self, grids: np.ndarray, pitches=None, training: bool = True) -> Tensor:
        x = Tensor(np.asarray(grids, dtype=self.dtype))
        z = self.encode_tensor(x, training)
        return self.loss_tensor(self.decode_tensor(z, pitches, training), x.data)

    def train_step(self, grids, optimizer: Adam, pitches=None) -> float:
        grids = np.asarray(grids)
        if grids.shape[0] < 2:
            raise ValueError("baseline training needs a batch of at least 2 (batch norm)")
        optimizer.zero_grad()
        loss = self.loss(grids, pitches, training=True)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {optimizer.state.t}")
        loss.backward()
        optimizer.step()
        return value

    def reconstruct(self, grid, pitch=None, like: MagnitudePlane | None = None) -> MagnitudePlane:
        return self.decode(self.encode(grid), pitch, like)

    # persistence
    def config_dict(self) -> dict:
        return {"kind": "baseline", "config": asdict(self.cfg), "seed": self.seed}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"bn.{k}.mean"] = s.mean
            out[f"bn.{k}.var"] = s.var
        return out

    def load_arrays(self, tensors: dict[str, np.ndarray]) -> None:
        for k, v in tensors.items():
            if k.startswith("bn."):
                name, stat = k[3:].rsplit(".", 1)
                getattr(self.bn[name], stat)[...] = v
            else:
                self.params[k].data = v.astype(self.dtype)

    def save(self, path) -> None:
        write_checkpoint(path, self.state_arrays(), self.config_dict())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "BaselineAutoencoder":
        tensors, cfg = read_checkpoint(path)
        if not cfg or cfg.get("kind") != "baseline":
            raise ValueError(f"{path} is not a baseline autoencoder checkpoint")
        model = cls(BaselineConfig(**cfg["config"]), seed=cfg.get("seed", 0), dtype=dtype)
        model.load_arrays(tensors)
        return model


def reconstruct_audio(M: MagnitudePlane, gl_iters: int = 1000, seed: int = 0) -> np.ndarray:
    """Undo the log-power normalization and recover phase with Griffin-Lim."""
    if M.scale == "log_power" and (M.peak is None or M.floor is None):
        raise ValueError("log-power plane lacks normalization metadata")
    audio, _ = griffin_lim(M, iters=gl_iters, seed=seed)
    return audio
