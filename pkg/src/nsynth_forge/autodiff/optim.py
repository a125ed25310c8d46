"""Adam with bias correction and piecewise-constant learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant schedule: ``(iteration, rate)`` breakpoints, the first at 0."""

    breakpoints: tuple[tuple[int, float], ...]

    def __post_init__(self):
        its = [i for i, _ in self.breakpoints]
        if not its or its[0] != 0:
            raise ValueError("schedule must start at iteration 0")
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("breakpoint iterations must be strictly increasing")
        if any(r <= 0 for _, r in self.breakpoints):
            raise ValueError("learning rates must be positive")


WAVENET_SCHEDULE = LrSchedule(((0, 2e-4), (120_000, 6e-5), (180_000, 2e-5), (240_000, 6e-6)))
BASELINE_SCHEDULE = LrSchedule(((0, 1e-4),))


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    rate = schedule.breakpoints[0][1]
    for it, r in schedule.breakpoints:
        if iteration >= it:
            rate = r
        else:
            break
    return rate


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place Adam update of every parameter that has a gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


class Adam:
    """Convenience wrapper binding a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: dict[str, Tensor], lr: float | LrSchedule = 1e-4, **kw):
        self.params = params
        self.schedule = lr if isinstance(lr, LrSchedule) else LrSchedule(((0, float(lr)),))
        self.state = AdamState(**kw)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        lr = lr_at(self.schedule, self.state.t)
        adam_step(self.params, {k: p.grad for k, p in self.params.items() if p.grad is not None}, self.state, lr)
        return lr
