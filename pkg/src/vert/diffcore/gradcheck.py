"""Central finite-difference checks against the analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d fn / d arr by central differences; ``arr`` is perturbed in place and restored."""
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn()
        flat[i] = orig - h
        lo = fn()
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference over the larger max magnitude; gradients smaller than
    ``floor`` everywhere are compared in absolute terms (finite-difference noise)."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between analytic and numeric gradients, with all
    ``leaves`` concatenated into one gradient vector."""
    analytic = grad(loss_fn(), leaves)
    numeric = [numeric_grad(lambda: float(loss_fn().data), leaf.data, h) for leaf in leaves]
    if not leaves:
        return 0.0
    return rel_error(np.concatenate([a.data.ravel() for a in analytic]),
                     np.concatenate([n.ravel() for n in numeric]))
