"""WaveNet autoencoder: a non-causal dilated encoder pooled into a temporal
embedding, and a causal gated WaveNet decoder biased at every layer by a
projection of that embedding (optionally concatenated with a pitch one-hot)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (Adam, Tensor, avg_pool1d, concat, conv1d, init_uniform, nn_upsample1d, no_grad,
                       read_checkpoint, softmax_ce, write_checkpoint)
from .dsp import MIN_PITCH, mulaw_decode, mulaw_encode

log = logging.getLogger(__name__)

N_PITCHES = 88


def default_dilations(layers: int, cycle: int = 10) -> list[int]:
    """Repeated stacks of 1, 2, 4, ... 2**(cycle-1)."""
    return [2 ** (i % cycle) for i in range(layers)]


@dataclass
class WavenetEncoderConfig:
    layers: int = 30
    channels: int = 128
    kernel: int = 3
    pool_stride: int = 512
    embedding_dim: int = 16
    dilation_pattern: list[int] | None = None

    def __post_init__(self):
        if self.dilation_pattern is None:
            self.dilation_pattern = default_dilations(self.layers)
        if len(self.dilation_pattern) != self.layers:
            raise ValueError("dilation_pattern length must equal layers")

    @property
    def receptive_field(self) -> int:
        """One-sided reach (samples) of the conv stack around each output sample."""
        half = (self.kernel - 1) // 2 + (self.kernel - 1) % 2
        return half * (1 + sum(self.dilation_pattern))


@dataclass
class WavenetDecoderConfig:
    layers: int = 30
    residual_channels: int = 64
    skip_channels: int = 128
    kernel: int = 2
    quantization_levels: int = 256
    pitch_conditioning: bool = False
    pitch_classes: int = N_PITCHES
    dilation_pattern: list[int] | None = None

    def __post_init__(self):
        if self.quantization_levels != 256:
            raise ValueError("quantization_levels must be 256 (8-bit mu-law)")
        if self.kernel != 2:
            raise ValueError("decoder kernel width is fixed at 2")
        if self.dilation_pattern is None:
            self.dilation_pattern = default_dilations(self.layers)
        if len(self.dilation_pattern) != self.layers:
            raise ValueError("dilation_pattern length must equal layers")

    @property
    def receptive_field(self) -> int:
        return 2 + sum(self.dilation_pattern)


def pitch_onehot(pitches, n: int = N_PITCHES, dtype=np.float32) -> np.ndarray:
    idx = np.asarray(pitches) - MIN_PITCH
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"pitch outside [{MIN_PITCH}, {MIN_PITCH + n})")
    out = np.zeros((len(idx), n), dtype=dtype)
    out[np.arange(len(idx)), idx] = 1
    return out


def shifted_onehot(codes: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, T) codes -> (B, 256, T) one-hot of the codes delayed by one step; step 0 is all zeros."""
    B, T = codes.shape
    out = np.zeros((B, 256, T), dtype=dtype)
    if T > 1:
        b = np.repeat(np.arange(B), T - 1)
        t = np.tile(np.arange(1, T), B)
        out[b, codes[:, :-1].reshape(-1), t] = 1
    return out


class WavenetAutoencoder:
    def __init__(self, encoder: WavenetEncoderConfig | None = None, decoder: WavenetDecoderConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.enc_cfg = encoder or WavenetEncoderConfig()
        self.dec_cfg = decoder or WavenetDecoderConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # parameters
    def _add(self, name, rng, shape, fan_in, zero=False):
        if zero:
            self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        else:
            self.params[name] = init_uniform(rng, shape, fan_in, self.dtype)

    def _init_params(self, rng):
        e, d = self.enc_cfg, self.dec_cfg
        C, K = e.channels, e.kernel
        self._add("enc.start.w", rng, (C, 1, K), K)
        self._add("enc.start.b", rng, (C,), 0, zero=True)
        for i in range(e.layers):
            self._add(f"enc.{i}.dil.w", rng, (C, C, K), C * K)
            self._add(f"enc.{i}.dil.b", rng, (C,), 0, zero=True)
            self._add(f"enc.{i}.res.w", rng, (C, C, 1), C)
            self._add(f"enc.{i}.res.b", rng, (C,), 0, zero=True)
        self._add("enc.out.w", rng, (e.embedding_dim, C, 1), C)
        self._add("enc.out.b", rng, (e.embedding_dim,), 0, zero=True)

        R, S = d.residual_channels, d.skip_channels
        cond = self.cond_channels
        self._add("dec.start.w", rng, (R, 256, 2), 2)
        self._add("dec.start.b", rng, (R,), 0, zero=True)
        for i in range(d.layers):
            self._add(f"dec.{i}.dil.w", rng, (2 * R, R, 2), 2 * R)
            self._add(f"dec.{i}.dil.b", rng, (2 * R,), 0, zero=True)
            self._add(f"dec.{i}.cond.w", rng, (2 * R, cond, 1), cond)
            self._add(f"dec.{i}.res.w", rng, (R, R, 1), R)
            self._add(f"dec.{i}.res.b", rng, (R,), 0, zero=True)
            self._add(f"dec.{i}.skip.w", rng, (S, R, 1), R)
            self._add(f"dec.{i}.skip.b", rng, (S,), 0, zero=True)
        self._add("dec.post.w", rng, (S, S, 1), S)
        self._add("dec.post.b", rng, (S,), 0, zero=True)
        # zero-initialised output layer: untrained logits are exactly uniform
        self._add("dec.logit.w", rng, (256, S, 1), S, zero=True)
        self._add("dec.logit.b", rng, (256,), 0, zero=True)

    @property
    def cond_channels(self) -> int:
        extra = self.dec_cfg.pitch_classes if self.dec_cfg.pitch_conditioning else 0
        return self.enc_cfg.embedding_dim + extra

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # encoder
    def encode_tensor(self, x: Tensor) -> Tensor:
        """(B, T) audio -> (B, embedding_dim, T // pool_stride) embedding tensor."""
        e = self.enc_cfg
        p = self.p
        h = conv1d(x.reshape(x.shape[0], 1, x.shape[1]), p("enc.start.w"), p("enc.start.b"))
        for i, dil in enumerate(e.dilation_pattern):
            d = conv1d(h.relu(), p(f"enc.{i}.dil.w"), p(f"enc.{i}.dil.b"), dilation=dil)
            h = h + conv1d(d.relu(), p(f"enc.{i}.res.w"), p(f"enc.{i}.res.b"))
        z = conv1d(h, p("enc.out.w"), p("enc.out.b"))
        return avg_pool1d(z, e.pool_stride, e.pool_stride, partial="drop")

    def encode(self, x) -> np.ndarray:
        """Temporal embedding of one buffer as a (T, C) array, T = len(x) // pool_stride."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("encode expects a non-empty 1-D buffer")
        if x.size < self.enc_cfg.pool_stride:
            raise ValueError(f"buffer shorter than one pooling window ({self.enc_cfg.pool_stride})")
        with no_grad():
            return self.encode_tensor(Tensor(x[None])).data[0].T.copy()

    # decoder
    def _condition(self, z: Tensor, pitches) -> Tensor:
        """(B, E, Tz) embedding -> (B, cond_channels, Tz) conditioning at embedding rate."""
        if not self.dec_cfg.pitch_conditioning:
            return z
        if pitches is None:
            raise ValueError("pitch-conditioned decoder needs pitches")
        oh = pitch_onehot(pitches, self.dec_cfg.pitch_classes, self.dtype)
        oh = np.repeat(oh[:, :, None], z.shape[2], axis=2)
        return concat([z, Tensor(oh)], axis=1)

    def _upsample_to(self, c: Tensor, length: int) -> Tensor:
        stride = self.enc_cfg.pool_stride
        Tz = c.shape[2]
        if -(-length // stride) > Tz + 1 or Tz == 0:
            raise ValueError(f"embedding of {Tz} steps cannot condition {length} samples at stride {stride}")
        if Tz * stride < length:
            c = concat([c, c[:, :, Tz - 1:Tz]], axis=2)
        return nn_upsample1d(c, stride)[:, :, :length]

    def decode_tensor(self, codes: np.ndarray, z: Tensor, pitches=None) -> Tensor:
        """Teacher-forced logits (B, 256, T) for mu-law ``codes`` (B, T) given embedding ``z`` (B, E, Tz)."""
        d = self.dec_cfg
        p = self.p
        B, T = codes.shape
        cond = self._condition(z, pitches)
        h = conv1d(Tensor(shifted_onehot(codes, self.dtype)), p("dec.start.w"), p("dec.start.b"), causal=True)
        R = d.residual_channels
        skip = None
        for i, dil in enumerate(d.dilation_pattern):
            bias = self._upsample_to(conv1d(cond, p(f"dec.{i}.cond.w")), T)
            a = conv1d(h, p(f"dec.{i}.dil.w"), p(f"dec.{i}.dil.b"), dilation=dil, causal=True) + bias
            gated = a[:, :R].tanh() * a[:, R:].sigmoid()
            h = h + conv1d(gated, p(f"dec.{i}.res.w"), p(f"dec.{i}.res.b"))
            s = conv1d(gated, p(f"dec.{i}.skip.w"), p(f"dec.{i}.skip.b"))
            skip = s if skip is None else skip + s
        out = conv1d(skip.relu(), p("dec.post.w"), p("dec.post.b")).relu()
        return conv1d(out, p("dec.logit.w"), p("dec.logit.b"))

    def decode_teacher_forced(self, x, z, pitch=None) -> np.ndarray:
        """Logits (T, 256) for one buffer ``x`` under embedding ``z`` (Tz, E)."""
        codes = mulaw_encode(x)[None].astype(np.int64)
        zt = Tensor(np.asarray(z, dtype=self.dtype).T[None].copy())
        with no_grad():
            logits = self.decode_tensor(codes, zt, None if pitch is None else [pitch])
        return logits.data[0].T.copy()

    def loss(self, audio: np.ndarray, pitches=None, z_override: np.ndarray | None = None) -> Tensor:
        """Mean teacher-forced cross-entropy (nats) over a (B, T) batch."""
        audio = np.asarray(audio, dtype=self.dtype)
        codes = mulaw_encode(audio).astype(np.int64)
        if z_override is None:
            z = self.encode_tensor(Tensor(audio))
        else:
            z = Tensor(np.asarray(z_override, dtype=self.dtype))
        logits = self.decode_tensor(codes, z, pitches)
        B, K, T = logits.shape
        return softmax_ce(logits.transpose(0, 2, 1).reshape(B * T, K), codes.reshape(-1))

    def train_step(self, audio, optimizer: Adam, pitches=None) -> float:
        audio = np.asarray(audio)
        if audio.ndim != 2 or audio.shape[0] == 0:
            raise ValueError("train_step expects a non-empty (batch, time) array")
        optimizer.zero_grad()
        loss = self.loss(audio, pitches)
        value = loss.item()
        if not np.isfinite(value):
            bad = [k for k, p in self.params.items() if not np.all(np.isfinite(p.data))]
            raise FloatingPointError(f"non-finite loss {value} at step {optimizer.state.t}; "
                                     f"non-finite parameters: {bad or 'none'}")
        loss.backward()
        optimizer.step()
        return value

    # fast autoregressive sampling
    def _np(self, name: str) -> np.ndarray:
        return self.params[name].data

    def sample(self, z, n_samples: int | None = None, pitch=None, seed: int = 0, mode: str = "sample",
               return_logits: bool = False):
        """Generate audio one sample at a time from embedding(s) ``z``.

        ``z`` is (Tz, E) or a batch (B, Tz, E); ``pitch`` a MIDI number or one
        per batch item. Each layer keeps a rolling buffer of its last
        ``dilation`` inputs, so a step costs O(layers). Returns the decoded
        audio (and, with ``return_logits``, the (B, n, 256) logits seen at each
        step).
        """
        if mode not in ("sample", "argmax"):
            raise ValueError("mode must be 'sample' or 'argmax'")
        z = np.asarray(z, dtype=self.dtype)
        single = z.ndim == 2
        if single:
            z = z[None]
        B, Tz, E = z.shape
        stride = self.enc_cfg.pool_stride
        n = n_samples if n_samples is not None else Tz * stride
        if n > Tz * stride:
            raise ValueError(f"embedding of {Tz} steps covers {Tz * stride} samples, {n} requested")
        pitches = None
        if self.dec_cfg.pitch_conditioning:
            if pitch is None:
                raise ValueError("pitch-conditioned decoder needs a pitch")
            pitches = np.broadcast_to(np.atleast_1d(pitch), (B,))
        d = self.dec_cfg
        R = d.residual_channels
        with no_grad():
            cond = self._condition(Tensor(z.transpose(0, 2, 1).copy()), pitches).data  # (B, Cc, Tz)
        cond_proj = [np.einsum("oc,bct->bto", self._np(f"dec.{i}.cond.w")[:, :, 0], cond) for i in range(d.layers)]

        W = {k: v.data for k, v in self.params.items() if k.startswith("dec.")}
        start_prev, start_cur = W["dec.start.w"][:, :, 0], W["dec.start.w"][:, :, 1]
        dil_prev = [W[f"dec.{i}.dil.w"][:, :, 0] for i in range(d.layers)]
        dil_cur = [W[f"dec.{i}.dil.w"][:, :, 1] for i in range(d.layers)]
        res = [W[f"dec.{i}.res.w"][:, :, 0] for i in range(d.layers)]
        skp = [W[f"dec.{i}.skip.w"][:, :, 0] for i in range(d.layers)]
        post_w, logit_w = W["dec.post.w"][:, :, 0], W["dec.logit.w"][:, :, 0]
        bufs = [np.zeros((dil, B, R), dtype=self.dtype) for dil in d.dilation_pattern]
        rng = np.random.default_rng(seed)
        codes = np.zeros((B, n), dtype=np.int64)
        all_logits = np.zeros((B, n, 256), dtype=self.dtype) if return_logits else None
        prev_col = np.zeros((B, R), dtype=self.dtype)  # start-conv contribution of the input one step back
        cur_code = None
        rows = np.arange(B)
        for t in range(n):
            cur_col = start_cur[:, cur_code].T if cur_code is not None else np.zeros((B, R), dtype=self.dtype)
            h = prev_col + cur_col + W["dec.start.b"]
            prev_col = start_prev[:, cur_code].T if cur_code is not None else np.zeros((B, R), dtype=self.dtype)
            skip = 0.0
            tz = t // stride
            for i, dil in enumerate(d.dilation_pattern):
                slot = t % dil
                past = bufs[i][slot]
                a = past @ dil_prev[i].T + h @ dil_cur[i].T + W[f"dec.{i}.dil.b"] + cond_proj[i][:, tz]
                bufs[i][slot] = h
                g = np.tanh(a[:, :R]) * _sigmoid(a[:, R:])
                h = h + g @ res[i].T + W[f"dec.{i}.res.b"]
                skip = skip + g @ skp[i].T + W[f"dec.{i}.skip.b"]
            o = np.maximum(np.maximum(skip, 0) @ post_w.T + W["dec.post.b"], 0)
            logits = o @ logit_w.T + W["dec.logit.b"]
            if return_logits:
                all_logits[:, t] = logits
            if mode == "argmax":
                c = logits.argmax(axis=1)
            else:
                pr = np.exp(logits - logits.max(axis=1, keepdims=True))
                cdf = np.cumsum(pr, axis=1)
                u = rng.random(B) * cdf[:, -1]
                c = np.minimum((cdf < u[:, None]).sum(axis=1), 255)
            codes[rows, t] = c
            cur_code = c
        audio = mulaw_decode(codes)
        if single:
            audio = audio[0]
            if return_logits:
                all_logits = all_logits[0]
        return (audio, all_logits) if return_logits else audio

    # persistence
    def config_dict(self) -> dict:
        return {"kind": "wavenet", "encoder": asdict(self.enc_cfg), "decoder": asdict(self.dec_cfg), "seed": self.seed}

    def save(self, path) -> None:
        write_checkpoint(path, {k: v.data for k, v in self.params.items()}, self.config_dict())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "WavenetAutoencoder":
        tensors, cfg = read_checkpoint(path)
        if not cfg or cfg.get("kind") != "wavenet":
            raise ValueError(f"{path} is not a WaveNet autoencoder checkpoint")
        model = cls(WavenetEncoderConfig(**cfg["encoder"]), WavenetDecoderConfig(**cfg["decoder"]),
                    seed=cfg.get("seed", 0), dtype=dtype)
        for k, v in tensors.items():
            model.params[k].data = v.astype(dtype)
        return model


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def interpolate(z_a, z_b, alpha: float) -> np.ndarray:
    """Linear blend ``(1 - alpha) * z_a + alpha * z_b`` of two embeddings."""
    z_a, z_b = np.asarray(z_a), np.asarray(z_b)
    if z_a.shape != z_b.shape:
        raise ValueError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return z_a.copy()
    if alpha == 1.0:
        return z_b.copy()
    return (1.0 - alpha) * z_a + alpha * z_b
