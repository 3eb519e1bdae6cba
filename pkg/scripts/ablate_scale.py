"""Mask-scale ablation: tune once per superpixel side u and compare curves.

    python scripts/ablate_scale.py --preset hard-digit --u 1 2 4 8 --out runs/ablation
"""
import argparse
import json
from pathlib import Path

import numpy as np

from vert.pipeline import RunConfig, ablate_scale


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="hard-digit")
    ap.add_argument("--u", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ablate_scale(RunConfig.preset(args.preset), args.u, out)
    for u, r in summary["scales"].items():
        area = np.mean([v for _, v in r["curve"]])
        print(f"u={u:>3}  iou={r['iou']:.3f}  kept={r['mean_kept']:.3f}  curve area={area:.3f}")
    if summary["skipped"]:
        print("skipped:", summary["skipped"])
    print(json.dumps({"out": str(out)}))


if __name__ == "__main__":
    main()
