"""Counterfactual distributions, masks and the relaxed attribution loss."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..diffcore import tensor as T
from ..diffcore.tensor import Tensor
from ..errors import ShapeError


@dataclass(frozen=True, eq=False)
class CounterfactualQ:
    """Replacement distribution for masked-out features.

    ``dirac``: the constant per-channel mean image.
    ``color-normal``: one N(mu_c, sigma_c^2) draw per channel, broadcast over H x W.
    ``pixel-normal``: an independent N(mu_c, sigma_c^2) draw for every pixel.
    ``empirical``: a uniformly chosen row of a pool of distractor images.
    """

    kind: str
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    pool: np.ndarray | None = None

    @classmethod
    def dirac(cls, mu) -> "CounterfactualQ":
        return cls("dirac", mu=np.atleast_1d(np.asarray(mu, dtype=np.float64)))

    @classmethod
    def color_normal(cls, mu, sigma) -> "CounterfactualQ":
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape).copy()
        return cls("color-normal", mu=mu, sigma=sigma)

    @classmethod
    def pixel_normal(cls, mu, sigma) -> "CounterfactualQ":
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape).copy()
        return cls("pixel-normal", mu=mu, sigma=sigma)

    @classmethod
    def empirical(cls, pool) -> "CounterfactualQ":
        return cls("empirical", pool=np.asarray(pool, dtype=np.float64))

    def sample(self, rng: np.random.Generator, shape, n: int = 1) -> np.ndarray:
        """``n`` replacement images of ``shape`` = (C, H, W), stacked on axis 0."""
        shape = tuple(shape)
        if self.kind == "dirac":
            img = np.broadcast_to(self.mu.reshape((-1,) + (1,) * (len(shape) - 1)), shape)
            return np.broadcast_to(img, (n,) + shape).copy()
        if self.kind == "color-normal":
            c = self.mu.size
            draws = self.mu + self.sigma * rng.normal(size=(n, c))
            draws = draws.reshape((n, c) + (1,) * (len(shape) - 1))
            return np.broadcast_to(draws, (n,) + shape).copy()
        if self.kind == "pixel-normal":
            bshape = (-1,) + (1,) * (len(shape) - 1)
            return self.mu.reshape(bshape) + self.sigma.reshape(bshape) * rng.normal(size=(n,) + shape)
        if self.kind == "empirical":
            if tuple(self.pool.shape[1:]) != shape:
                raise ShapeError(f"distractor pool has shape {self.pool.shape[1:]}, need {shape}")
            return self.pool[rng.integers(len(self.pool), size=n)].copy()
        raise ValueError(f"unknown Q kind {self.kind!r}")

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.mu is not None:
            out["mu"] = self.mu.tolist()
        if self.sigma is not None:
            out["sigma"] = self.sigma.tolist()
        if self.pool is not None:
            out["pool_size"] = len(self.pool)
        return out


def sample_q(q: CounterfactualQ, rng: np.random.Generator, shape) -> np.ndarray:
    return q.sample(rng, shape, 1)[0]


@dataclass
class AttributionMask:
    weights: np.ndarray       # (H/u, W/u)
    u: int = 1
    rounded: bool = False
    owner: int = -1

    def upsampled(self) -> np.ndarray:
        return upsample_mask(self)


@dataclass
class MaskSet:
    """Per-sample masks for a dataset, stored batched."""

    weights: np.ndarray        # (N, h, w) in [0, 1]
    frozen: np.ndarray         # (N, h, w) bool, entries pinned at 0
    u: int = 1
    rounded: bool = False
    owners: np.ndarray | None = None

    @classmethod
    def ones(cls, n: int, image_hw, u: int, owners=None) -> "MaskSet":
        h, w = image_hw
        if h % u or w % u:
            raise ShapeError(f"mask scale {u} does not divide {h}x{w}")
        shape = (n, h // u, w // u)
        return cls(np.ones(shape), np.zeros(shape, dtype=bool), u, False,
                   np.arange(n) if owners is None else np.asarray(owners))

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i) -> AttributionMask:
        owner = int(self.owners[i]) if self.owners is not None else int(i)
        return AttributionMask(self.weights[i].copy(), self.u, self.rounded, owner)

    def copy(self) -> "MaskSet":
        return dataclasses.replace(self, weights=self.weights.copy(), frozen=self.frozen.copy())

    def upsampled(self) -> np.ndarray:
        return np.repeat(np.repeat(self.weights, self.u, axis=1), self.u, axis=2)

    def subset(self, idx) -> "MaskSet":
        return dataclasses.replace(self, weights=self.weights[idx].copy(), frozen=self.frozen[idx].copy(),
                                   owners=None if self.owners is None else self.owners[idx])


def upsample_mask(m, shape=None) -> np.ndarray:
    """Nearest-neighbour block replication of a mask to pixel resolution."""
    if isinstance(m, AttributionMask):
        w, u = m.weights, m.u
    else:
        w, u = np.asarray(m), 1
    out = np.repeat(np.repeat(w, u, axis=-2), u, axis=-1) if u > 1 else np.array(w, dtype=np.float64)
    if shape is not None and tuple(out.shape[-2:]) != tuple(shape[-2:]):
        raise ShapeError(f"mask of {w.shape} at scale {u} cannot cover {tuple(shape[-2:])}")
    return out


def upsample_to(m, u: int, hw) -> Tensor:
    """Differentiable upsampling with a divisibility check against the image size."""
    m = T.as_tensor(m)
    h, w = hw
    if h % u or w % u or m.shape[-2:] != (h // u, w // u):
        raise ShapeError(f"mask {m.shape[-2:]} at scale {u} does not tile an image of {h}x{w}")
    return T.upsample_blocks(m, u)


def apply_mask(x, m, q, u: int = 1) -> Tensor:
    """x_s = m * x + (1 - m) * q with the mask upsampled to pixel resolution.

    ``x`` and ``q`` are (..., C, H, W); ``m`` is (..., H/u, W/u) and shared by
    all channels.  If ``m`` already has the shape of ``x`` it is applied
    elementwise.
    """
    if isinstance(m, AttributionMask):
        m, u = m.weights, m.u
    x, q, m = T.as_tensor(x), T.as_tensor(q), T.as_tensor(m)
    if q.shape != x.shape:
        raise ShapeError(f"replacement shape {q.shape} differs from input {x.shape}")
    if m.shape == x.shape and u == 1:
        up = m
    else:
        if x.ndim < 3:
            raise ShapeError(f"mask {m.shape} does not match input {x.shape}")
        up = upsample_to(m, u, x.shape[-2:])
        lead = up.shape[:-2]
        up = T.reshape(up, lead + (1,) + up.shape[-2:])
        if up.ndim != x.ndim:
            raise ShapeError(f"mask batch {m.shape} does not match input {x.shape}")
    return T.add(T.mul(up, x), T.mul(T.sub(1.0, up), q))


def qfa_losses(f, x, m, qs, lam1: float, u: int = 1, fx=None) -> Tensor:
    """Per-sample relaxed attribution loss, averaged over the draws in ``qs``.

    ``x``: (B, C, H, W); ``m``: (B, h, w) tensor; ``qs``: (n_q, B, C, H, W).
    Returns a (B,) tensor ``|m|_1 + lam1 * mean_q |f(x) - f(x_s)|_1``.
    """
    m = T.as_tensor(m)
    if fx is None:
        with T.no_grad():
            fx = f(np.asarray(x)).data
    sparsity = T.tsum(T.abs_(m), axis=tuple(range(1, m.ndim)))
    if lam1 == 0.0:
        return sparsity
    n_q = len(qs)
    dev = None
    for q in qs:
        xs = apply_mask(x, m, q, u)
        term = T.tsum(T.abs_(T.sub(f(xs), fx)), axis=1)
        dev = term if dev is None else T.add(dev, term)
    return T.add(sparsity, T.mul(dev, lam1 / n_q))


def qfa_loss(f, x, m, Q: CounterfactualQ, lam1: float, n_q: int = 1, u: int = 1,
             rng: np.random.Generator | None = None) -> Tensor:
    """Scalar relaxed attribution loss for one sample (or summed over a batch)."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    if isinstance(m, AttributionMask):
        m, u = m.weights, m.u
    m = T.as_tensor(m)
    batched = x.ndim == 4
    xb = x if batched else x[None]
    mb = m if batched else T.reshape(m, (1,) + m.shape)
    qs = np.stack([Q.sample(rng, xb.shape[1:], len(xb)) for _ in range(n_q)])
    return T.tsum(qfa_losses(f, xb, mb, qs, lam1, u))
