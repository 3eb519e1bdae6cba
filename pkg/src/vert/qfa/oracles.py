"""Exhaustive attribution oracles for tiny inputs.

Both oracles share one set of counterfactual draws (fixed by ``seed``) so
their notions of "the output stays within eps" coincide exactly.  Masks are
over pixel positions and shared across channels.  Ties are broken by
(popcount, sorted index tuple), i.e. the order of ``itertools.combinations``.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import UsageError
from .masking import CounterfactualQ

BRUTE_FORCE_LIMIT = 20
ROUNDOFF = 1e-12   # the full mask reproduces f(x) only up to summation order
LFA_LIMIT = 12


def _as_fn(f):
    if hasattr(f, "predict_proba"):
        return f.predict_proba
    return lambda z: np.asarray(f(z))


def _layout(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None], x.shape, x.size
    return x.reshape(x.shape[0], -1), x.shape, x.shape[-2] * x.shape[-1]


class DeviationOracle:
    """mean_q |f(x_s(m, q)) - f(x)|_1 for batches of binary pixel masks."""

    def __init__(self, f, x, Q: CounterfactualQ, n_q: int = 32, seed: int = 0, chunk: int = 4096):
        self.fn = _as_fn(f)
        self.xf, self.shape, self.d = _layout(x)
        qs = Q.sample(np.random.default_rng(seed), self.shape, n_q)
        self.qf = qs.reshape(n_q, self.xf.shape[0], -1)
        self.fx = self.fn(np.asarray(x, dtype=np.float64)[None])[0]
        self.chunk = chunk

    def __call__(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.float64)
        n_q = len(self.qf)
        out = np.empty(len(bits))
        step = max(1, self.chunk // n_q)
        for i in range(0, len(bits), step):
            mb = bits[i:i + step][:, None, None, :]
            xs = mb * self.xf[None, None] + (1.0 - mb) * self.qf[None]
            probs = self.fn(xs.reshape((-1,) + self.shape))
            dev = np.abs(probs - self.fx).sum(axis=1).reshape(len(mb), n_q)
            out[i:i + step] = dev.mean(axis=1)
        return out


def _to_mask(idx, d, shape):
    m = np.zeros(d, dtype=np.uint8)
    m[list(idx)] = 1
    return m.reshape(shape[-2:]) if len(shape) > 1 else m


def brute_force_qfa(f, x, Q: CounterfactualQ, eps: float, n_q: int = 32, seed: int = 0,
                    limit: int = BRUTE_FORCE_LIMIT) -> np.ndarray:
    """The sparsest binary mask whose averaged output deviation is at most ``eps``.

    Candidates are visited by increasing popcount, each level in lexicographic
    index order, so the first feasible mask is the minimiser under the
    deterministic tie-break.
    """
    oracle = DeviationOracle(f, x, Q, n_q, seed)
    d = oracle.d
    if d > limit:
        raise UsageError(f"brute force needs d <= {limit}, got {d}")
    for k in range(d + 1):
        combos = list(itertools.combinations(range(d), k))
        bits = np.zeros((len(combos), d))
        for r, idx in enumerate(combos):
            bits[r, list(idx)] = 1.0
        dev = oracle(bits)
        ok = np.flatnonzero(dev <= eps + ROUNDOFF)
        if ok.size:
            return _to_mask(combos[ok[0]], d, oracle.shape)
    raise AssertionError("the full mask always satisfies the constraint")


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.uint32)
    c = np.zeros_like(a)
    while a.any():
        c += a & 1
        a = a >> 1
    return c


def _bits_matrix(d: int) -> np.ndarray:
    ints = np.arange(2 ** d, dtype=np.uint32)
    return ((ints[:, None] >> np.arange(d, dtype=np.uint32)) & 1).astype(np.float64)


def feasibility_table(f, x, Q, eps, n_q=32, seed=0) -> np.ndarray:
    """Indicator over all 2^d binary perturbations (bit i of the index = pixel i)."""
    oracle = DeviationOracle(f, x, Q, n_q, seed)
    return oracle(_bits_matrix(oracle.d)) <= eps + ROUNDOFF


def lfa_mask(f, x, Q: CounterfactualQ, eps: float, lam: float | None = None, n_q: int = 32,
             seed: int = 0, surrogate: str = "threshold", limit: int = LFA_LIMIT) -> np.ndarray:
    """Fit a binary-weight surrogate to the feasibility indicator over all
    binary perturbations and return its weights as a mask.

    ``surrogate`` selects how a weight vector g scores a perturbation xi:
    ``threshold`` uses 1[g^T xi >= |g|_0] (all selected features kept),
    ``linear`` the raw g^T xi, ``centered`` the raw form after subtracting
    means of target and prediction.  The objective is the mean squared
    residual over xi in {0,1}^d plus ``lam * |g|_0``; ``lam`` defaults to
    2^-d / (d + 1), below the cost of a single misfit perturbation.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size if x.ndim == 1 else x.shape[-2] * x.shape[-1]
    if d > limit:
        raise UsageError(f"LFA enumeration needs d <= {limit}, got {d}")
    if lam is None:
        lam = 2.0 ** -d / (d + 1)
    target = feasibility_table(f, x, Q, eps, n_q, seed).astype(np.float64)
    xi = np.arange(2 ** d, dtype=np.uint32)
    g_all = np.arange(2 ** d, dtype=np.uint32)
    pop_g = _popcount(g_all)
    losses = np.empty(2 ** d)
    for i in range(0, 2 ** d, 256):
        g = g_all[i:i + 256, None]
        if surrogate == "threshold":
            pred = ((xi[None] & g) == g).astype(np.float64)
            resid = target[None] - pred
        elif surrogate in ("linear", "centered"):
            pred = _popcount(xi[None] & g).astype(np.float64)
            resid = target[None] - pred
            if surrogate == "centered":
                resid = resid - resid.mean(axis=1, keepdims=True)
        else:
            raise UsageError(f"unknown surrogate {surrogate!r}")
        losses[i:i + 256] = (resid ** 2).mean(axis=1)
    losses += lam * pop_g
    best = np.flatnonzero(np.isclose(losses, losses.min(), rtol=0.0, atol=1e-15))
    bits = _bits_matrix(d)[best]
    keys = [(int(b.sum()), tuple(np.flatnonzero(b))) for b in bits]
    choice = bits[min(range(len(best)), key=keys.__getitem__)]
    return _to_mask(np.flatnonzero(choice), d, x.shape)
