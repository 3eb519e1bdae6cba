"""Tiny signal-distractor problems with an exactly computable Bayes posterior.

A single-channel ``rows x cols`` image carries one signal block at a uniformly
random placement.  Block pixels are ``amplitude * code + noise`` where the
code is a random sign pattern whose parity is the label, so every block pixel
is needed to read the label.  All other pixels are Gaussian distractor noise.

Blocks have an odd pixel count: with an even count a constant fill reads as
even parity, which lets an off-manifold replacement impersonate a class.  The
signal noise is wide enough that a row of distractor pixels carries only weak
parity evidence, so the feasible masks of the Bayes posterior have a single
minimal element on nearly every instance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .generators import Dataset, DatasetConfig


@dataclass(frozen=True)
class TinyConfig:
    rows: int = 4
    cols: int = 4
    block: tuple[int, int] = (1, 3)
    amplitude: float = 3.0
    signal_noise: float = 1.0
    distractor_std: float = 0.3


def _log_normal(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)


class TinyProblem:
    num_classes = 2

    def __init__(self, config: TinyConfig = TinyConfig()):
        self.config = config
        br, bc = config.block
        if br > config.rows or bc > config.cols or br * bc >= config.rows * config.cols:
            raise ValueError("block must be strictly smaller than the image")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (1, self.config.rows, self.config.cols)

    @property
    def d(self) -> int:
        return self.config.rows * self.config.cols

    @cached_property
    def placements(self) -> list[np.ndarray]:
        """Flat pixel indices covered by each block placement."""
        c = self.config
        br, bc = c.block
        out = []
        for r0 in range(c.rows - br + 1):
            for c0 in range(c.cols - bc + 1):
                idx = [(r0 + i) * c.cols + (c0 + j) for i in range(br) for j in range(bc)]
                out.append(np.array(idx))
        return out

    @cached_property
    def codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Sign patterns grouped by label (parity of the number of -1 entries)."""
        b = self.config.block[0] * self.config.block[1]
        allc = np.array(list(itertools.product([1.0, -1.0], repeat=b)))
        parity = (allc < 0).sum(axis=1) % 2
        return allc[parity == 0], allc[parity == 1]

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        c = self.config
        y = rng.integers(2, size=n)
        d = rng.normal(0.0, c.distractor_std, size=(n, self.d))
        s = np.zeros((n, self.d))
        m = np.zeros((n, self.d), dtype=np.uint8)
        for i in range(n):
            idx = self.placements[rng.integers(len(self.placements))]
            group = self.codes[y[i]]
            code = group[rng.integers(len(group))]
            s[i, idx] = c.amplitude * code + c.signal_noise * rng.normal(size=len(idx))
            m[i, idx] = 1
        x = s * m + d * (1 - m)
        shp = (n,) + self.shape
        cfg = DatasetConfig(kind="hard-digit", image_size=c.rows, channels=1, num_classes=2,
                            signal_size=(1, 1))
        return Dataset(x=x.reshape(shp), y=y.astype(np.int64), s=s.reshape(shp), d=d.reshape(shp),
                       m=m.reshape((n, c.rows, c.cols)), config=cfg, ids=np.arange(n))

    def sample_distractors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.config.distractor_std, size=(n,) + self.shape)

    def posterior(self, x) -> np.ndarray:
        """Exact p(y | x) for a batch of images, shape (N, 2)."""
        c = self.config
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        base = _log_normal(x, 0.0, c.distractor_std)
        total = base.sum(axis=1)
        logp = np.empty((len(x), 2))
        for label, group in enumerate(self.codes):
            terms = []
            for idx in self.placements:
                xb = x[:, idx]
                sig = _log_normal(xb[:, None, :], c.amplitude * group[None], c.signal_noise).sum(-1)
                terms.append(sig - base[:, idx].sum(axis=1, keepdims=True))
            t = np.concatenate(terms, axis=1)
            mx = t.max(axis=1, keepdims=True)
            logp[:, label] = total + mx[:, 0] + np.log(np.exp(t - mx).mean(axis=1))
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)

    __call__ = posterior
