"""SGD on per-sample masks and the rounding schedule."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ..diffcore import tensor as T
from ..diffcore.tensor import Tensor
from ..errors import NumericalError, ShapeError
from .masking import CounterfactualQ, MaskSet, qfa_losses

log = logging.getLogger(__name__)


@dataclass
class MaskOptConfig:
    lam1: float = 10.0
    lr: float = 0.05
    batch_size: int = 256
    max_epochs: int = 100
    min_epochs: int = 5
    tol: float = 1e-3
    patience: int = 3
    n_q: int = 1


@contextlib.contextmanager
def frozen_params(model):
    """Stop recording parameter gradients while the model is held fixed."""
    params = model.parameters() if hasattr(model, "parameters") else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def converged(trace: list[float], tol: float, patience: int) -> bool:
    """Relative change of consecutive values below ``tol`` for ``patience`` steps."""
    if len(trace) <= patience:
        return False
    for a, b in zip(trace[-patience - 1:-1], trace[-patience:]):
        if abs(b - a) > tol * max(abs(a), 1e-12):
            return False
    return True


def _predict(f, x):
    if hasattr(f, "predict_proba"):
        return f.predict_proba(x)
    with T.no_grad():
        out = f(x)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def optimize_masks(f, x, Q: CounterfactualQ, cfg: MaskOptConfig, masks: MaskSet | None = None,
                   u: int = 1, rng: np.random.Generator | None = None):
    """Minimise the relaxed attribution loss over per-sample masks with ``f`` frozen.

    Returns ``(masks, trace)`` where ``trace`` holds the epoch-mean loss.  If
    the loss turns non-finite the error carries the last stable masks in
    ``err.masks``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = rng or np.random.default_rng(0)
    if masks is None:
        masks = MaskSet.ones(len(x), x.shape[-2:], u)
    else:
        masks = masks.copy()
    if len(masks) != len(x):
        raise ShapeError(f"{len(masks)} masks for {len(x)} samples")
    u = masks.u
    fx = _predict(f, x)
    n, shape = len(x), x.shape[1:]
    trace: list[float] = []
    stable = masks.copy()
    with frozen_params(f):
        for epoch in range(cfg.max_epochs):
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                sl = slice(start, min(start + cfg.batch_size, n))
                b = sl.stop - sl.start
                mt = Tensor(masks.weights[sl], requires_grad=True)
                qs = Q.sample(rng, shape, cfg.n_q * b).reshape((cfg.n_q, b) + shape)
                loss = T.tsum(qfa_losses(f, x[sl], mt, qs, cfg.lam1, u, fx[sl]))
                (g,) = T.grad(loss, [mt])
                if not (np.isfinite(loss.data) and np.isfinite(g.data).all()):
                    err = NumericalError(f"mask loss became non-finite at epoch {epoch}")
                    err.masks = stable
                    raise err
                w = np.clip(masks.weights[sl] - cfg.lr * g.data, 0.0, 1.0)
                w[masks.frozen[sl]] = 0.0
                masks.weights[sl] = w
                total += float(loss.data)
            trace.append(total / n)
            stable = masks.copy()
            if epoch + 1 >= cfg.min_epochs and converged(trace, cfg.tol, cfg.patience):
                break
    log.debug("mask optimisation: %d epochs, final loss %.4f", len(trace), trace[-1])
    return masks, trace


def round_step(masks: MaskSet, j: int, k: int) -> MaskSet:
    """Step ``j`` of ``k`` of the freezing schedule with threshold j / (k + 1).

    Entries below the threshold are zeroed and frozen for good; at the last
    step every surviving entry is set to 1, so the result is binary.
    """
    if not 1 <= j <= k:
        raise ValueError(f"rounding step {j} outside 1..{k}")
    tau = j / (k + 1)
    out = masks.copy()
    newly = (out.weights < tau) & ~out.frozen
    out.frozen |= newly
    out.weights[out.frozen] = 0.0
    if j == k:
        out.weights[~out.frozen] = 1.0
        out = dataclasses.replace(out, rounded=True)
    return out
