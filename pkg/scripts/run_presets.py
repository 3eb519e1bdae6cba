"""Run both preset pipelines and print the headline metrics.

    python scripts/run_presets.py --out runs
"""
import argparse
import json
import time
from pathlib import Path

from vert.pipeline import RunConfig, run_pipeline


def headline(run: Path) -> dict:
    rep = json.loads((run / "report.json").read_text())
    base = json.loads((run / "baseline.json").read_text())
    out = {"baseline_accuracy": base["test_accuracy"],
           "iou": {k: round(v["mean"], 3) for k, v in rep["iou"].items() if v["mean"] is not None},
           "faithfulness": (rep["faithfulness_original"], rep["faithfulness_simplified"]),
           "verifiability": rep["verifiability"]}
    if "flipped_accuracy" in base:
        out["flipped_accuracy"] = base["flipped_accuracy"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--presets", nargs="+", default=["hard-digit", "spurious-patch"])
    args = ap.parse_args()
    for name in args.presets:
        cfg = RunConfig.preset(name)
        cfg.seed = args.seed
        run = Path(args.out) / name
        start = time.perf_counter()
        run_pipeline(cfg, run)
        print(f"== {name} ({time.perf_counter() - start:.0f}s) -> {run}")
        print(json.dumps(headline(run), indent=2))


if __name__ == "__main__":
    main()
