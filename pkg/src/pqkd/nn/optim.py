"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one Adam update in place using each parameter's ``.grad``."""
    if len(state.m) != len(params):
        raise UsageError(f"Adam state tracks {len(state.m)} parameters but {len(params)} were given")
    for idx, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{idx}"
            raise UsageError(f"parameter {label} has no gradient; call backward() first")
        if p.grad.shape != p.shape or state.m[idx].shape != p.shape:
            raise UsageError(f"parameter {p.name or idx}: gradient/moment shape mismatch")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
