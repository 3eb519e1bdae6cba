"""Training classifiers whose input gradients point at an uninformative corner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Classifier
from .errors import ConfigError, UnsupportedOpError
from .evaluate import (eval_q, input_gradient, iou_stats, mask_map, perturbation_curve,
                       smoothgrad)
from .training import TrainConfig, minimize


@dataclass
class ManipulationTarget:
    """Ones on the top-left ``corner x corner`` block, scaled by ``amplitude``.

    A small amplitude steers the gradient map without making the logits
    depend strongly on the corner pixels."""

    image_hw: tuple[int, int]
    corner: int = 8
    lam_m: float = 1.0
    amplitude: float = 0.2

    def __post_init__(self):
        h, w = self.image_hw
        if not 1 <= self.corner or self.corner >= min(h, w):
            raise ConfigError(f"corner {self.corner} must be smaller than the image {h}x{w}")
        if self.lam_m < 0:
            raise ConfigError("lam_m must be nonnegative")

    @property
    def mask(self) -> np.ndarray:
        t = np.zeros(self.image_hw)
        t[:self.corner, :self.corner] = 1.0
        return t

    @property
    def grid(self) -> np.ndarray:
        return self.amplitude * self.mask


def gradient_penalty(model: Classifier, x, labels, target: ManipulationTarget) -> T.Tensor:
    """Mean over the batch of |d z_y / d x - t|^2, differentiable in the parameters."""
    xt = T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    z = model.logits(xt)
    onehot = np.eye(model.num_classes)[np.asarray(labels)]
    (gx,) = T.grad(T.tsum(T.mul(z, onehot)), [xt], create_graph=True)
    diff = T.sub(gx, target.grid)
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / len(x))


def train_manipulated(model: Classifier, x, y, target: ManipulationTarget, cfg: TrainConfig) -> Classifier:
    """Cross-entropy plus ``lam_m`` times the gradient penalty, in place.

    Needs a model whose every layer supports differentiating through its
    backward pass (softplus MLPs); ``lam_m == 0`` is plain training.
    """
    if target.lam_m and not model.nested_ok:
        raise UnsupportedOpError("gradient manipulation needs a nested-differentiable model "
                                 "(e.g. a softplus MLP)")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)

    def batch_loss(idx):
        loss = T.cross_entropy(model.logits(x[idx]), y[idx])
        if target.lam_m:
            loss = T.add(loss, T.mul(gradient_penalty(model, x[idx], y[idx], target), target.lam_m))
        return loss

    minimize(model, batch_loss, len(x), cfg.epochs, cfg.lr, cfg.batch_size, rng,
             cfg.weight_decay, tag="manipulation")
    return model


def corner_mass_ratio(model: Classifier, x, target: ManipulationTarget) -> float:
    """Mean |input gradient| per pixel inside the corner over the same outside it."""
    g = input_gradient(model, x).scores.mean(axis=0)
    inside = target.mask.astype(bool)
    return float(g[inside].mean() / max(g[~inside].mean(), 1e-300))


def corner_cosine(model: Classifier, x, target: ManipulationTarget) -> float:
    g = input_gradient(model, x).scores.mean(axis=0).ravel()
    t = target.mask.ravel()
    return float(g @ t / (np.linalg.norm(g) * np.linalg.norm(t) + 1e-300))


def manipulation_report(f_manip: Classifier, x, truth, vert_model: Classifier, vert_maps,
                        ks, smoothgrad_n: int = 25, seed: int = 0) -> dict:
    """IOU and perturbation curves of VerT, input-grad and SmoothGrad on a manipulated model.

    ``vert_model``/``vert_maps`` come from tuning ``f_manip``; gradient maps
    are taken on ``f_manip`` itself.
    """
    x = np.asarray(x, dtype=np.float64)
    q = eval_q(x)
    maps = {"vert-preround": (vert_model, mask_map(vert_maps)),
            "input-grad": (f_manip, input_gradient(f_manip, x)),
            "smoothgrad": (f_manip, smoothgrad(f_manip, x, n=smoothgrad_n, seed=seed))}
    out = {}
    for name, (model, amap) in maps.items():
        mean, std, n = iou_stats(amap, truth)
        curve = perturbation_curve(model, amap, x, q, ks)
        out[name] = {"iou_mean": mean, "iou_std": std, "n": n, "curve": [[int(k), float(v)] for k, v in zip(ks, curve)]}
    return out
