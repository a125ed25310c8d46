"""Layer operations used by the two autoencoders and the classifier.

Every op computes its forward pass in numpy and returns a Tensor whose
backward closure is written out by hand. conv1d lowers to one GEMM per
direction (im2col); the 2-D convolutions loop over kernel taps in a fixed
order. BLAS splits a GEMM over output blocks rather than the reduction, so
results do not depend on thread count (checked in the tests).
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _sigmoid


def _pads_1d(k: int, dilation: int, causal: bool) -> tuple[int, int]:
    total = (k - 1) * dilation
    if causal:
        return total, 0
    left = total // 2
    return left, total - left


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1, causal: bool = False) -> Tensor:
    """Dilated 1-D convolution on ``(batch, channels, time)``; output keeps the time length.

    ``w`` has shape ``(out_ch, in_ch, k)``. Causal mode left-pads by
    ``(k-1)*dilation`` so output ``t`` sees inputs ``<= t`` only; otherwise
    padding is split evenly (extra sample on the right).
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    B, C, T = x.shape
    O, Cw, K = w.shape
    if C != Cw:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Cw}")
    left, right = _pads_1d(K, dilation, causal)
    # im2col in (K*C, B*T) layout so each direction is one GEMM
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    if left or right:
        xt = np.pad(xt, ((0, 0), (0, 0), (left, right)))
    if K == 1:
        cols = xt.reshape(C, B * T)
    else:
        cols = np.empty((K, C, B, T), dtype=xt.dtype)
        for j in range(K):
            cols[j] = xt[:, :, j * dilation: j * dilation + T]
        cols = cols.reshape(K * C, B * T)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(O, K * C)
    out2 = w2 @ cols
    if b is not None:
        out2 += b.data[:, None]
    out = out2.reshape(O, B, T).transpose(1, 0, 2)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(O, B * T)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(K, C, B, T)
            gxt = np.zeros((C, B, T + left + right), dtype=g.dtype)
            for j in range(K):
                gxt[:, :, j * dilation: j * dilation + T] += gcols[j]
            gx = gxt[:, :, left: left + T].transpose(1, 0, 2)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(O, K, C).transpose(0, 2, 1)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, back)


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _conv2d_raw(xp: np.ndarray, w: np.ndarray, s: tuple[int, int], oh: int, ow: int) -> np.ndarray:
    B, C = xp.shape[:2]
    O, _, kh, kw = w.shape
    out = np.zeros((B, O, oh * ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i: i + s[0] * oh: s[0], j: j + s[1] * ow: s[1]].reshape(B, C, oh * ow)
            out += np.matmul(w[:, :, i, j], patch)
    return out.reshape(B, O, oh, ow)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, s, xp_shape) -> np.ndarray:
    B, O, oh, ow = g.shape
    _, C, kh, kw = w.shape
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    gf = g.reshape(B, O, oh * ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i: i + s[0] * oh: s[0], j: j + s[1] * ow: s[1]] += np.matmul(w[:, :, i, j].T, gf).reshape(B, C, oh, ow)
    return gxp


def _conv2d_weight_grad(g: np.ndarray, xp: np.ndarray, w_shape, s) -> np.ndarray:
    B, O, oh, ow = g.shape
    _, C, kh, kw = w_shape
    gw = np.empty(w_shape, dtype=g.dtype)
    gf = g.reshape(B, O, oh * ow)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i: i + s[0] * oh: s[0], j: j + s[1] * ow: s[1]].reshape(B, C, oh * ow)
            gw[:, :, i, j] = np.tensordot(gf, patch, axes=([0, 2], [0, 2]))
    return gw


def _pad_geometry(h: int, w: int, k: tuple[int, int], s: tuple[int, int]):
    oh, pt, pb = _same_pad(h, k[0], s[0])
    ow, pl, pr = _same_pad(w, k[1], s[1])
    # strided slicing reads up to (o-1)*s + k rows; make sure they exist
    hp = max(h + pt + pb, (oh - 1) * s[0] + k[0])
    wp = max(w + pl + pr, (ow - 1) * s[1] + k[1])
    return oh, ow, pt, pl, hp, wp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(2, 2)) -> Tensor:
    """Strided cross-correlation with SAME padding on ``(batch, ch, h, w)``.

    Output spatial size is ``ceil(in / stride)``; ``w`` is ``(out, in, kh, kw)``.
    """
    stride = tuple(stride)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Cw}")
    oh, ow, pt, pl, hp, wp = _pad_geometry(H, W, (kh, kw), stride)
    xp = np.zeros((B, C, hp, wp), dtype=x.data.dtype)
    xp[:, :, pt: pt + H, pl: pl + W] = x.data
    out = _conv2d_raw(xp, w.data, stride, oh, ow)
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        gx = _conv2d_input_grad(g, w.data, stride, xp.shape)[:, :, pt: pt + H, pl: pl + W] if x.requires_grad else None
        gw = _conv2d_weight_grad(g, xp, w.shape, stride) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, back)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(2, 2), out_hw=None) -> Tensor:
    """Adjoint of :func:`conv2d`: maps ``(B, in, h, w)`` to ``(B, out, h*s, w*s)``.

    ``w`` has shape ``(in, out, kh, kw)``, i.e. the kernel of the conv2d this
    op transposes. ``out_hw`` overrides the target size (any size whose
    SAME-conv output is ``(h, w)``).
    """
    stride = tuple(stride)
    B, C, h, wd = x.shape
    Cw, O, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Cw}")
    H, W = out_hw if out_hw is not None else (h * stride[0], wd * stride[1])
    oh, ow, pt, pl, hp, wp = _pad_geometry(H, W, (kh, kw), stride)
    if (oh, ow) != (h, wd):
        raise ValueError(f"cannot transpose {(h, wd)} to {(H, W)} with stride {stride}")
    gxp = _conv2d_input_grad(x.data, w.data, stride, (B, O, hp, wp))
    out = np.ascontiguousarray(gxp[:, :, pt: pt + H, pl: pl + W])
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        gp = np.zeros((B, O, hp, wp), dtype=g.dtype)
        gp[:, :, pt: pt + H, pl: pl + W] = g
        gx = _conv2d_raw(gp, w.data, stride, oh, ow) if x.requires_grad else None
        gw = _conv2d_weight_grad(x.data, gp, w.shape, stride) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, back)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize every channel (axis 1) over the remaining axes.

    In training mode batch statistics are used and ``state`` is updated as
    ``running = (1 - momentum) * running + momentum * batch``; in eval mode
    the running statistics are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state is not None:
            state.mean[...] = (1 - momentum) * state.mean + momentum * mu
            state.var[...] = (1 - momentum) * state.var + momentum * var
    else:
        if state is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    n = xd.size // xd.shape[1]

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) / n * (
                n * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


def avg_pool1d(x: Tensor, width: int, stride: int | None = None, partial: str = "pad") -> Tensor:
    """Average pooling along the last axis.

    A trailing partial window is zero-padded (``partial="pad"``) or dropped
    (``partial="drop"``).
    """
    stride = stride or width
    if width < 1 or stride < 1:
        raise ValueError("pool width and stride must be >= 1")
    T = x.shape[-1]
    if partial == "drop":
        n_out = (T - width) // stride + 1 if T >= width else 0
    else:
        n_out = max(-(-(T - width) // stride) + 1, 1)
    need = (n_out - 1) * stride + width
    xd = x.data
    if need > T:
        xd = np.concatenate([xd, np.zeros(xd.shape[:-1] + (need - T,), dtype=xd.dtype)], axis=-1)
    if width == stride:
        out = xd[..., : n_out * width].reshape(xd.shape[:-1] + (n_out, width)).mean(axis=-1)
    else:
        out = np.stack([xd[..., t * stride: t * stride + width].mean(axis=-1) for t in range(n_out)], axis=-1)

    def back(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        if width == stride:
            gx[..., : n_out * width] = np.repeat(g / width, width, axis=-1)
        else:
            for t in range(n_out):
                gx[..., t * stride: t * stride + width] += g[..., t: t + 1] / width
        return (gx[..., :T],)

    return Tensor._make(out, (x,), back)


def nn_upsample1d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    shape = x.shape

    def back(g):
        return (g.reshape(shape + (factor,)).sum(axis=-1),)

    return Tensor._make(np.repeat(x.data, factor, axis=-1), (x,), back)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out + b if b is not None else out


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels."""
    labels = np.asarray(labels)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / N),)

    return Tensor._make(loss, (logits,), back)


def sigmoid_ce(logits: Tensor, targets) -> Tensor:
    """Mean elementwise sigmoid cross-entropy; targets may be soft in [0, 1]."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    z = logits.data
    loss = np.asarray((np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean(), dtype=logits.dtype)
    n = z.size

    def back(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return Tensor._make(loss, (logits,), back)
