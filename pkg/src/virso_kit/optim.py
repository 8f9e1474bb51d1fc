"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value
from .errors import InvalidParameterError


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus schedule knobs."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Value], state: AdamState) -> None:
    """One update. Decay is decoupled: p *= (1 - lr*wd) before the Adam delta.

    Raises on non-finite gradients, naming the offending parameter.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise InvalidParameterError(
                f"non-finite gradient for parameter {p.name or i}"
            )
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: list[Value]) -> None:
    for p in params:
        p.zero_grad()


def snapshot(params: list[Value]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def restore(params: list[Value], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()
