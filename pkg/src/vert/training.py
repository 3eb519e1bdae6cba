"""Plain cross-entropy training of the black-box baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Classifier
from .diffcore.optim import Adam
from .errors import NumericalError
from .qfa.optimize import converged

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


def accuracy(model: Classifier, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    return float((model.predict(x) == np.asarray(y)).mean())


def minimize(model: Classifier, batch_loss, n: int, epochs: int, lr: float, batch_size: int,
             rng: np.random.Generator, weight_decay: float = 0.0, tag: str = "train",
             tol: float | None = None, patience: int = 3) -> list[float]:
    """Adam over shuffled minibatches; ``batch_loss(idx)`` returns a scalar Tensor.

    Returns the per-epoch mean loss.  With ``tol`` set, stops once the relative
    change stays below it for ``patience`` epochs.  A non-finite loss raises
    NumericalError with the parameters reset to the last finite epoch.
    """
    opt = Adam(lr=lr)
    params = model.parameters()
    trace: list[float] = []
    stable = model.flat_params()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = batch_loss(idx)
            if weight_decay:
                loss = T.add(loss, T.mul(sum_squares(params), 0.5 * weight_decay))
            value = float(loss.data)
            if not np.isfinite(value):
                model.load_flat(stable)
                raise NumericalError(f"{tag}: non-finite loss at epoch {epoch}")
            grads = T.grad(loss, params)
            for p, new in zip(params, opt.update([p.data for p in params], [g.data for g in grads])):
                p.data = new
            total += value * len(idx)
        trace.append(total / n)
        stable = model.flat_params()
        log.debug("%s epoch %d loss %.4f", tag, epoch, trace[-1])
        if tol is not None and converged(trace, tol, patience):
            break
    return trace


def sum_squares(params):
    out = None
    for p in params:
        term = T.tsum(T.mul(p, p))
        out = term if out is None else T.add(out, term)
    return out


def train_classifier(model: Classifier, x, y, cfg: TrainConfig) -> list[float]:
    """Cross-entropy + Adam, in place.  Zero epochs leaves the model untouched."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    return minimize(model, lambda idx: T.cross_entropy(model.logits(x[idx]), y[idx]), len(x),
                    cfg.epochs, cfg.lr, cfg.batch_size, rng, cfg.weight_decay, tag="baseline")
