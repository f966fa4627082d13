"""Central finite-difference gradient checks for scalar functions of tensors."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), a scale-aware elementwise comparison."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and numerical gradients over ``params``.

    Entries whose gradients are both below 1e-6 in magnitude are judged on
    absolute error (via the floor), since relative error is meaningless there.
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = max(worst, relative_error(analytic, numerical_grad(fn, p, h), floor=1e-6))
    return worst
