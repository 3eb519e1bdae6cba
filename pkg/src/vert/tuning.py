"""Alternating mask / model optimisation that turns a black-box classifier
into one whose masked explanations can be checked by feature removal."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Classifier
from .errors import ConfigError, NumericalError
from .qfa.masking import CounterfactualQ, MaskSet, apply_mask, upsample_mask
from .qfa.oracles import DeviationOracle
from .qfa.optimize import MaskOptConfig, optimize_masks, round_step
from .training import minimize

log = logging.getLogger(__name__)


@dataclass
class VertConfig:
    lam1: float = 10.0
    lam2: float = 1.0
    eps: float = 0.05
    k: int = 4
    u: int = 4
    mask_lr: float = 0.01
    model_lr: float = 1e-3
    batch_size: int = 128
    mask_epochs: int = 100
    model_epochs: int = 10
    n_q: int = 1
    tol: float = 1e-3
    patience: int = 3
    seed: int = 0

    def validate(self, image_hw=None):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.u < 1:
            raise ConfigError(f"u must be >= 1, got {self.u}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ConfigError("lam1 and lam2 must be nonnegative")
        if self.eps < 0:
            raise ConfigError("eps must be nonnegative")
        if image_hw is not None and (image_hw[0] % self.u or image_hw[1] % self.u):
            raise ConfigError(f"u={self.u} does not divide {image_hw[0]}x{image_hw[1]}")
        return self

    def mask_config(self) -> MaskOptConfig:
        return MaskOptConfig(lam1=self.lam1, lr=self.mask_lr, batch_size=self.batch_size,
                             max_epochs=self.mask_epochs, tol=self.tol, patience=self.patience,
                             n_q=self.n_q)


@dataclass
class VertResult:
    model: Classifier
    masks: MaskSet                 # binary, after the last rounding step
    continuous_masks: MaskSet      # weights just before the last rounding step
    log: dict = field(default_factory=dict)


def train_loss(f_v: Classifier, f_b, x, m, qs, lam2: float, u: int = 1, fb_x=None) -> T.Tensor:
    """Mean over the batch of |f_v(x) - f_v(x_s)|_1 (averaged over the draws
    in ``qs``) plus ``lam2 * |f_b(x) - f_v(x)|_1``.  Only f_v is differentiated."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    fv_x = f_v(x)
    n = len(x)
    data = None
    for q in qs:
        term = T.tsum(T.abs_(T.sub(fv_x, f_v(apply_mask(x, m, q, u)))))
        data = term if data is None else T.add(data, term)
    data = T.mul(data, 1.0 / (len(qs) * n))
    if lam2 == 0.0:
        return data
    if fb_x is None:
        fb_x = f_b.predict_proba(x) if hasattr(f_b, "predict_proba") else np.asarray(f_b(x))
    model = T.mul(T.tsum(T.abs_(T.sub(fb_x, fv_x))), lam2 / n)
    return T.add(data, model)


def satisfied_fraction(f, x, masks: MaskSet, Q: CounterfactualQ, eps: float, n_q: int = 32,
                       seed: int = 0) -> tuple[float, np.ndarray]:
    """Share of samples whose binary mask keeps the averaged output deviation within ``eps``."""
    w = masks.upsampled().reshape(len(masks), -1)
    dev = np.array([DeviationOracle(f, x[i], Q, n_q, seed + i)(w[i:i + 1])[0] for i in range(len(x))])
    return float((dev <= eps).mean()), dev


def _mask_phase(f_v, x, Q, cfg: VertConfig, masks: MaskSet, rng, state):
    try:
        return optimize_masks(f_v, x, Q, cfg.mask_config(), masks, cfg.u, rng)
    except NumericalError as err:
        err.model, err.state = f_v, state
        raise


def _model_phase(f_v: Classifier, f_b_probs, x, masks: MaskSet, Q, cfg: VertConfig, rng):
    shape = x.shape[1:]
    w = masks.weights

    def batch_loss(idx):
        qs = Q.sample(rng, shape, cfg.n_q * len(idx)).reshape((cfg.n_q, len(idx)) + shape)
        return train_loss(f_v, None, x[idx], w[idx], qs, cfg.lam2, masks.u, f_b_probs[idx])

    return minimize(f_v, batch_loss, len(x), cfg.model_epochs, cfg.model_lr, cfg.batch_size, rng,
                    tag="model phase", tol=cfg.tol, patience=cfg.patience)


def verifiability_tune(f_b: Classifier, x, Q: CounterfactualQ, cfg: VertConfig) -> VertResult:
    """Alternate mask fitting, rounding and model distillation for ``cfg.k`` rounds.

    ``f_v`` starts as an exact copy of ``f_b`` and all masks start at one.  On a
    non-finite loss the raised NumericalError carries ``model`` and ``state``
    (masks, step) of the last stable point.
    """
    x = np.asarray(x.x if hasattr(x, "x") else x, dtype=np.float64)
    if len(x) == 0:
        raise ConfigError("empty dataset")
    cfg.validate(x.shape[-2:])
    rng = np.random.default_rng(cfg.seed)
    f_v = f_b.copy()
    masks = MaskSet.ones(len(x), x.shape[-2:], cfg.u)
    run_log: dict = {
        "init_params_equal": bool(np.array_equal(f_v.flat_params(), f_b.flat_params())),
        "init_masks_ones": bool((masks.weights == 1.0).all()),
        "steps": [],
    }
    fb_probs = f_b.predict_proba(x)
    continuous = masks
    for j in range(1, cfg.k + 1):
        state = {"masks": masks.copy(), "step": j}
        masks, mask_trace = _mask_phase(f_v, x, Q, cfg, masks, rng, state)
        continuous = masks.copy()
        zeros_before = masks.frozen.copy()
        masks = round_step(masks, j, cfg.k)
        try:
            model_trace = _model_phase(f_v, fb_probs, x, masks, Q, cfg, rng)
        except NumericalError as err:
            err.model, err.state = f_v, {"masks": masks.copy(), "step": j}
            raise
        step = {
            "step": j,
            "tau": j / (cfg.k + 1),
            "mask_loss": mask_trace,
            "model_loss": model_trace,
            "zero_set_monotone": bool((masks.frozen | ~zeros_before).all()),
            "mean_mask_fraction": float(masks.weights.mean()),
        }
        run_log["steps"].append(step)
        log.info("round %d/%d: %d mask epochs, %d model epochs, kept %.3f", j, cfg.k,
                 len(mask_trace), len(model_trace), step["mean_mask_fraction"])
    frac, _ = satisfied_fraction(f_v, x, masks, Q, cfg.eps, seed=cfg.seed)
    run_log["eps_satisfied"] = frac
    run_log["binary"] = bool(np.isin(masks.weights, (0.0, 1.0)).all())
    run_log["recommended_sparsity"] = float(masks.upsampled().sum(axis=(1, 2)).mean())
    return VertResult(f_v, masks, continuous, run_log)


def attribute(f_v: Classifier, x, Q: CounterfactualQ, cfg: VertConfig) -> tuple[MaskSet, MaskSet]:
    """Masks for new inputs against the frozen tuned model: the same freezing
    schedule without model updates.  Returns ``(binary, continuous)``."""
    x = np.asarray(x, dtype=np.float64)
    cfg.validate(x.shape[-2:])
    rng = np.random.default_rng(cfg.seed + 1)
    masks = MaskSet.ones(len(x), x.shape[-2:], cfg.u)
    continuous = masks
    for j in range(1, cfg.k + 1):
        masks, _ = optimize_masks(f_v, x, Q, cfg.mask_config(), masks, cfg.u, rng)
        continuous = masks.copy()
        masks = round_step(masks, j, cfg.k)
    return masks, continuous


def recommended_sparsity(result: VertResult | MaskSet) -> float:
    """Mean number of kept pixels per sample at pixel resolution."""
    masks = result.masks if isinstance(result, VertResult) else result
    return float(np.mean([upsample_mask(masks[i]).sum() for i in range(len(masks))])) if len(masks) else 0.0
