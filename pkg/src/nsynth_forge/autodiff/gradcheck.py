"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def gradcheck(fn: Callable[[], Tensor], inputs: dict[str, Tensor] | list[Tensor], n_probes: int = 50,
              eps: float = 1e-6, seed: int = 0) -> float:
    """Compare backprop gradients of ``fn()`` against central differences.

    Probes ``n_probes`` coordinates chosen at random across ``inputs`` and
    returns the worst relative error ``|a - n| / max(|a|, |n|, 1e-8)``.
    Inputs should hold float64 data.
    """
    tensors = list(inputs.values()) if isinstance(inputs, dict) else list(inputs)
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = fn()
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    sizes = np.array([t.data.size for t in tensors])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        ti = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        flat = tensors[ti].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        num = (up - down) / (2 * eps)
        ana = float(analytic[ti].reshape(-1)[i])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
