"""SGD and Adam over lists of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, ShapeError
from .tensor import Tensor


def _check(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"parameter {i}: shape {np.shape(p)} vs gradient {np.shape(g)}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NumericalError(
                f"non-finite gradient for parameter {i} (shape {np.shape(g)}): "
                f"{int(bad.sum())} bad entries, first at {np.argwhere(bad)[0].tolist()}")


@dataclass
class SGD:
    lr: float

    def update(self, params, grads):
        _check(params, grads)
        return [p - self.lr * g for p, g in zip(params, grads)]


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params, grads):
        _check(params, grads)
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def step(opt, params, grads):
    """Functional form: return updated copies of ``params``."""
    return opt.update([np.asarray(p, dtype=np.float64) for p in params],
                      [np.asarray(g, dtype=np.float64) for g in grads])


def apply(opt, tensors: list[Tensor], grads=None):
    """Update tensors in place from ``grads`` (default: their ``.grad``)."""
    if grads is None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    new = opt.update([t.data for t in tensors], [np.asarray(g) for g in grads])
    for t, d in zip(tensors, new):
        t.data = d
