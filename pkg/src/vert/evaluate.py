"""Attribution baselines and the evaluation metrics.

Every model is probed with the same evaluation replacement (by default the
constant dataset-mean image).  Rankings break ties by pixel index so results
are deterministic.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Classifier
from .errors import ShapeError, UsageError
from .qfa.io import to_u8, write_pgm
from .qfa.masking import CounterfactualQ, MaskSet
from .training import TrainConfig, minimize

SOURCES = ("vert-preround", "input-grad", "smoothgrad", "ground-truth", "random")


@dataclass
class AttributionMap:
    scores: np.ndarray     # (N, H, W)
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise UsageError(f"unknown attribution source {self.source!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.isfinite(self.scores).all():
            raise UsageError("attribution scores must be finite")


# -- gradient attributions ----------------------------------------------------

def _logit_grad(f: Classifier, x: np.ndarray, cls: np.ndarray) -> np.ndarray:
    xt = T.Tensor(x, requires_grad=True)
    z = f.logits(xt)
    onehot = np.eye(f.num_classes)[cls]
    (g,) = T.grad(T.tsum(T.mul(z, onehot)), [xt])
    return g.data


def input_gradient(f: Classifier, x, batch_size: int = 256, classes=None) -> AttributionMap:
    """|d z_c / d x| summed over channels, for the predicted class c (or ``classes``)."""
    x = np.asarray(x, dtype=np.float64)
    cls = f.predict(x) if classes is None else np.asarray(classes)
    out = np.empty((len(x),) + x.shape[2:])
    for i in range(0, len(x), batch_size):
        sl = slice(i, i + batch_size)
        out[sl] = np.abs(_logit_grad(f, x[sl], cls[sl])).sum(axis=1)
    return AttributionMap(out, "input-grad")


def smoothgrad(f: Classifier, x, n: int = 25, sigma: float | None = None, seed: int = 0,
               batch_size: int = 256) -> AttributionMap:
    """Mean input-gradient map over ``n`` Gaussian perturbations of x.

    The class is fixed from the clean input.  ``sigma`` defaults to 0.15 of
    the input value range; ``sigma == 0`` returns the plain input gradient.
    """
    if n < 1:
        raise UsageError("smoothgrad needs n >= 1")
    x = np.asarray(x, dtype=np.float64)
    if sigma is None:
        sigma = 0.15 * float(x.max() - x.min())
    if sigma < 0:
        raise UsageError("sigma must be nonnegative")
    cls = f.predict(x)
    if sigma == 0:
        return AttributionMap(input_gradient(f, x, batch_size, cls).scores, "smoothgrad")
    rng = np.random.default_rng(seed)
    acc = np.zeros((len(x),) + x.shape[2:])
    for _ in range(n):
        noisy = x + sigma * rng.normal(size=x.shape)
        acc += input_gradient(f, noisy, batch_size, cls).scores
    return AttributionMap(acc / n, "smoothgrad")


def random_map(shape, seed: int = 0) -> AttributionMap:
    return AttributionMap(np.random.default_rng(seed).random(shape), "random")


def mask_map(masks: MaskSet | np.ndarray, source: str = "vert-preround") -> AttributionMap:
    w = masks.upsampled() if isinstance(masks, MaskSet) else np.asarray(masks, dtype=np.float64)
    return AttributionMap(w, source)


# -- metrics ------------------------------------------------------------------

def eval_q(x) -> CounterfactualQ:
    """Dirac at the per-channel dataset mean."""
    x = np.asarray(x, dtype=np.float64)
    return CounterfactualQ.dirac(x.mean(axis=(0, 2, 3)))


def removal_order(scores: np.ndarray) -> np.ndarray:
    """Flat pixel indices from least to most salient, ties by pixel index."""
    flat = scores.reshape(len(scores), -1)
    return np.argsort(flat, axis=1, kind="stable")


def perturbation_curve(f: Classifier, maps: AttributionMap | np.ndarray, x, Q_eval: CounterfactualQ,
                       ks, seed: int = 0) -> np.ndarray:
    """Fraction of samples whose argmax survives replacing the k least salient pixels."""
    x = np.asarray(x, dtype=np.float64)
    scores = maps.scores if isinstance(maps, AttributionMap) else np.asarray(maps)
    if scores.shape != (len(x),) + x.shape[2:]:
        raise ShapeError(f"attribution maps {scores.shape} do not match images {x.shape}")
    ks = [int(k) for k in ks]
    d = x.shape[-2] * x.shape[-1]
    if any(k < 0 or k > d for k in ks):
        raise UsageError(f"k must lie in [0, {d}]")
    if list(ks) != sorted(ks):
        raise UsageError("ks must be sorted ascending")
    order = removal_order(scores)
    base = f.predict(x)
    q = Q_eval.sample(np.random.default_rng(seed), x.shape[1:], len(x))
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(d)[None].repeat(len(x), 0), axis=1)
    out = []
    for k in ks:
        if k == 0:
            out.append(1.0)
            continue
        keep = (rank >= k).reshape((len(x), 1) + x.shape[2:])
        xs = np.where(keep, x, q)
        out.append(float((f.predict(xs) == base).mean()))
    return np.array(out)


def iou_top_n(scores: np.ndarray, truth: np.ndarray) -> float:
    """IOU of the top-n pixels with an n-pixel ground truth; NaN if the truth is empty."""
    truth = np.asarray(truth).astype(bool).ravel()
    n = int(truth.sum())
    if n == 0:
        return float("nan")
    flat = np.asarray(scores, dtype=np.float64).ravel()
    top = np.lexsort((np.arange(flat.size), -flat))[:n]
    pred = np.zeros_like(truth)
    pred[top] = True
    return float((pred & truth).sum() / (pred | truth).sum())


def iou_stats(maps: AttributionMap | np.ndarray, truths) -> tuple[float, float, int]:
    """Mean and std of IOU over samples with nonempty ground truth, and their count."""
    scores = maps.scores if isinstance(maps, AttributionMap) else np.asarray(maps)
    vals = np.array([iou_top_n(s, t) for s, t in zip(scores, truths)])
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        return float("nan"), float("nan"), 0
    return float(vals.mean()), float(vals.std()), int(vals.size)


def _masked(x, masks, Q: CounterfactualQ, seed: int) -> np.ndarray:
    w = masks.upsampled() if isinstance(masks, MaskSet) else np.asarray(masks, dtype=np.float64)
    q = Q.sample(np.random.default_rng(seed), x.shape[1:], len(x))
    w = w[:, None]
    return w * x + (1.0 - w) * q


def faithfulness(f_v: Classifier, f_b: Classifier, x, masks, Q_eval: CounterfactualQ,
                 seed: int = 0) -> tuple[float, float]:
    """Agreement of f_v with f_b's predictions on original and on masked inputs."""
    x = np.asarray(x, dtype=np.float64)
    target = f_b.predict(x)
    orig = float((f_v.predict(x) == target).mean())
    simp = float((f_v.predict(_masked(x, masks, Q_eval, seed)) == target).mean())
    return orig, simp


def model_verifiability(f: Classifier, x, truth_masks, Q_eval: CounterfactualQ, n_q: int = 1,
                        seed: int = 0) -> float:
    """Mean |f(x) - f(x_s)|_1 with the ground-truth masks applied."""
    x = np.asarray(x, dtype=np.float64)
    fx = f.predict_proba(x)
    total = 0.0
    for r in range(n_q):
        total += np.abs(fx - f.predict_proba(_masked(x, truth_masks, Q_eval, seed + r))).sum(axis=1).mean()
    return float(total / n_q)


def train_input_dropout(model: Classifier, x, y, rate: float, Q: CounterfactualQ,
                        cfg: TrainConfig) -> Classifier:
    """Cross-entropy training where every pixel is independently replaced by a
    draw from ``Q`` with probability ``rate``.  Trains ``model`` in place."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    shape = x.shape[1:]

    def batch_loss(idx):
        if rate == 0.0:
            return T.cross_entropy(model.logits(x[idx]), y[idx])
        keep = (rng.random((len(idx), 1) + shape[1:]) >= rate).astype(np.float64)
        q = Q.sample(rng, shape, len(idx))
        return T.cross_entropy(model.logits(keep * x[idx] + (1.0 - keep) * q), y[idx])

    minimize(model, batch_loss, len(x), cfg.epochs, cfg.lr, cfg.batch_size, rng,
             cfg.weight_decay, tag="input dropout")
    return model


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    iou: dict = field(default_factory=dict)            # source -> {"mean", "std", "n"}
    curves: dict = field(default_factory=dict)         # source -> [[k, consistency], ...]
    faithfulness: tuple = (float("nan"), float("nan"))
    verifiability: dict = field(default_factory=dict)  # model name -> l1 gap
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        vert = self.iou.get("vert-preround", {})
        return {
            "iou_mean": vert.get("mean"),
            "iou_std": vert.get("std"),
            "faithfulness_original": self.faithfulness[0],
            "faithfulness_simplified": self.faithfulness[1],
            "verifiability_l1": self.verifiability.get("vert"),
            "iou": self.iou,
            "curves": self.curves,
            "verifiability": self.verifiability,
            "curve_metric": "argmax consistency with the unmasked prediction",
            "config": self.config,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(_plain(self.to_json()), indent=2, sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_curve_csv(path, ks, values):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "consistency"])
        for k, v in zip(ks, values):
            w.writerow([int(k), repr(float(v))])


def read_curve_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["k"]) for r in rows]), np.array([float(r["consistency"]) for r in rows])


def mask_strip(x: np.ndarray, mask: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Side-by-side x | mask | x_s as one 8-bit grayscale image (channel mean)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    xs = m[None] * x + (1.0 - m[None]) * q
    lo, hi = min(x.min(), xs.min()), max(x.max(), xs.max())
    gray = [to_u8(x.mean(axis=0), lo, hi), to_u8(m, 0.0, 1.0), to_u8(xs.mean(axis=0), lo, hi)]
    return np.concatenate(gray, axis=1)


def write_strip(path, x, mask, q):
    write_pgm(path, mask_strip(x, mask, q))


def report_dict(report: EvalReport) -> dict:
    return _plain(asdict(report))
