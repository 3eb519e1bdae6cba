"""Exhaustive-oracle checks on tiny problems with a known posterior.

Reports how often the sparsest feasible mask equals the planted signal
under the true and a mismatched fill distribution, and how often the
surrogate-fitting mask agrees with the exhaustive one.

    python scripts/oracle_checks.py --n 200
"""
import argparse

import numpy as np

from vert.datasets import TinyConfig, TinyProblem, dataset_moments
from vert.qfa import CounterfactualQ, brute_force_qfa, lfa_mask


def recovery(n, eps, seed):
    tp = TinyProblem(TinyConfig())
    ds = tp.sample(n, np.random.default_rng(seed))
    qs = {"true": CounterfactualQ.pixel_normal(0.0, tp.config.distractor_std),
          "mismatched": CounterfactualQ.pixel_normal(*dataset_moments(ds.x))}
    for name, q in qs.items():
        masks = [brute_force_qfa(tp, ds.x[i], q, eps, seed=i) for i in range(n)]
        hits = np.mean([np.array_equal(m, t) for m, t in zip(masks, ds.m)])
        size = np.mean([m.sum() for m in masks])
        print(f"{name:>10} Q: exact recovery {hits:.3f}, mean mask size {size:.2f}")


def agreement(n, eps, seed):
    q = CounterfactualQ.pixel_normal(0.0, 0.3)
    for rows, cols in ((2, 5), (3, 3)):
        tp = TinyProblem(TinyConfig(rows=rows, cols=cols))
        ds = tp.sample(n, np.random.default_rng(seed))
        same = np.mean([np.array_equal(lfa_mask(tp, x, q, eps, seed=i), brute_force_qfa(tp, x, q, eps, seed=i))
                        for i, x in enumerate(ds.x)])
        print(f"{rows}x{cols}: lfa == brute force on {same:.3f} of {n}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    recovery(args.n, args.eps, args.seed)
    agreement(min(args.n, 25), args.eps, 7)


if __name__ == "__main__":
    main()
