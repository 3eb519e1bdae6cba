"""Command line front door: ``python -m vert <command>`` or ``vert <command>``.

Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 config error.
``VERT_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets as D
from . import pipeline as P
from .diffcore import checkpoint
from .errors import ConfigError, NumericalError, ShapeError, UsageError
from .evaluate import (eval_q, input_gradient, mask_map, perturbation_curve, random_map, smoothgrad,
                       write_curve_csv)
from .gradmanip import train_manipulated
from .qfa import MaskSet, load_masks
from .training import accuracy, train_classifier

log = logging.getLogger("vert")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4
METHODS = ("vert-preround", "input-grad", "smoothgrad", "random", "ground-truth")


def _config(args) -> P.RunConfig:
    base = P.RunConfig.preset(args.preset)
    cfg = P.load_config(args.config, base) if args.config else base
    return cfg.seeded()


def _override(cfg: P.RunConfig, section: str, **values) -> P.RunConfig:
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _load_data(path) -> D.Dataset:
    return D.load(_need(path))


def _load_model(path):
    return checkpoint.load(_need(path))


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args)
    kind = args.kind or cfg.dataset.kind
    dcfg = D.DatasetConfig() if kind == "hard-digit" else D.DatasetConfig.spurious()
    if kind == cfg.dataset.kind:
        dcfg = cfg.dataset
    if args.seed is not None:
        dcfg = dataclasses.replace(dcfg, seed=args.seed)
    dcfg.validate()
    n = args.n if args.n is not None else cfg.n
    if n < 1:
        raise ConfigError("n must be >= 1")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save(out, D.generate(dcfg, n))
    print(f"wrote {n} {kind} samples to {out}")


def cmd_train_baseline(args):
    cfg = _override(_config(args), "model", epochs=args.epochs, lr=args.lr)
    cfg.validate()
    ds = _load_data(args.data)
    train, test = P.split(cfg, ds)
    f_b = P.new_baseline(cfg, train)
    trace = train_classifier(f_b, train.x, train.y, cfg.train_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, f_b)
    info = {"test_accuracy": accuracy(f_b, test.x, test.y), "loss_trace": trace}
    P.write_json(out.with_suffix(".json"), info)
    print(f"test accuracy {info['test_accuracy']:.4f}")


def cmd_tune(args):
    cfg = _config(args)
    if args.q:
        cfg = dataclasses.replace(cfg, q=args.q)
    cfg = _override(cfg, "vert", k=args.k, u=args.u, lam1=args.lambda1, lam2=args.lambda2, eps=args.eps)
    ds = _load_data(args.data)
    n = ds.image_shape[-1]
    cfg.vert.validate(ds.image_shape[-2:])
    if cfg.q not in P.Q_KINDS:
        raise ConfigError(f"q must be one of {P.Q_KINDS}")
    f_b = _load_model(args.model)
    train, _ = P.split(cfg, ds)
    out = Path(args.out)
    with P.run_lock(out):
        result = P.stage_tune(cfg, f_b, train, out)
    print(f"tuned {n}x{n} model: eps satisfied on {result.log['eps_satisfied']:.3f} of training samples, "
          f"mean kept pixels {result.log['recommended_sparsity']:.1f}")


def cmd_attribute(args):
    cfg = _config(args)
    if args.q:
        cfg = dataclasses.replace(cfg, q=args.q)
    cfg = _override(cfg, "vert", k=args.k, u=args.u, lam1=args.lambda1)
    ds = _load_data(args.data)
    cfg.vert.validate(ds.image_shape[-2:])
    f_v = _load_model(args.model)
    train, test = P.split(cfg, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .tuning import attribute
    binary, continuous = attribute(f_v, test.x, P.make_q(cfg.q, train.x), cfg.vert)
    binary.owners = test.ids
    P.save_mask_pair(out, binary, continuous)
    print(f"wrote {len(binary)} masks to {out}")


def _preround(masks_path, u: int) -> MaskSet:
    binary = load_masks(_need(masks_path))
    side = P.preround_path(masks_path)
    if side.is_file():
        weights = np.load(side, allow_pickle=False)
        if weights.shape != binary.weights.shape:
            raise ShapeError(f"{side} does not match {masks_path}")
        return MaskSet(weights, weights == 0, binary.u, False, binary.owners)
    return binary


def cmd_eval(args):
    cfg = _config(args)
    ds = _load_data(args.data)
    f_b, f_v = _load_model(args.baseline), _load_model(args.model)
    binary = load_masks(_need(args.masks))
    continuous = _preround(args.masks, binary.u)
    train, test = P.split(cfg, ds)
    if len(binary) != len(test):
        raise ShapeError(f"{len(binary)} masks for {len(test)} test samples")
    out = Path(args.out)
    with P.run_lock(out):
        report = P.stage_eval(cfg, f_b, f_v, train, test, binary, continuous, out)
    print(json.dumps(P._plain({k: v for k, v in report.to_json().items()
                               if k in ("iou_mean", "iou_std", "faithfulness_original",
                                        "faithfulness_simplified", "verifiability_l1")}), sort_keys=True))


def cmd_perturb_curve(args):
    cfg = _config(args)
    ds = _load_data(args.data)
    model = _load_model(args.model)
    train, test = P.split(cfg, ds)
    if args.method == "vert-preround":
        if not args.masks:
            raise UsageError("--masks is required for vert-preround")
        amap = mask_map(_preround(args.masks, 1))
    elif args.method == "input-grad":
        amap = input_gradient(model, test.x)
    elif args.method == "smoothgrad":
        amap = smoothgrad(model, test.x, cfg.eval.smoothgrad_n, cfg.eval.smoothgrad_sigma, cfg.seed)
    elif args.method == "random":
        amap = random_map(test.m.shape, cfg.seed)
    else:
        amap = mask_map(test.m.astype(np.float64), "ground-truth")
    ks = P.k_grid(test.m.shape[1] * test.m.shape[2], args.n_ks or cfg.eval.n_ks)
    curve = perturbation_curve(model, amap, test.x, eval_q(train.x), ks, cfg.seed)
    write_curve_csv(args.out, ks, curve)
    print(f"wrote {len(ks)} points to {args.out}")


def cmd_manipulate(args):
    cfg = _override(_config(args), "manip", corner=args.corner_size, lam_m=args.lambda_m, amplitude=args.amplitude)
    ds = _load_data(args.data)
    train, test = P.split(cfg, ds)
    target = P.target_for(cfg, train)
    f_m = P.new_baseline(cfg, train)
    if not f_m.nested_ok:
        raise ConfigError("gradient manipulation needs the softplus MLP")
    train_manipulated(f_m, train.x, train.y, target, cfg.train_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, f_m)
    print(f"manipulated model test accuracy {accuracy(f_m, test.x, test.y):.4f}")


def cmd_ablate_scale(args):
    cfg = _config(args)
    u_list = [int(v) for v in args.u_list.replace(",", " ").split()]
    if not u_list:
        raise ConfigError("--u-list is empty")
    out = Path(args.out)
    with P.run_lock(out):
        summary = P.ablate_scale(cfg, u_list, out)
    for u, r in summary["scales"].items():
        print(f"u={u}: iou {r['iou']:.3f}, kept {r['mean_kept']:.3f}")
    for u in summary["skipped"]:
        print(f"warning: skipped u={u}", file=sys.stderr)


def cmd_report(args):
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    with P.run_lock(run):
        manifest = P.write_report(run)
    for name in manifest["missing"]:
        print(f"warning: missing {name}", file=sys.stderr)
    for name in manifest["changed"]:
        print(f"warning: checksum mismatch for {name}", file=sys.stderr)
    print(f"manifest: {len(manifest['entries'])} entries")


def cmd_pipeline(args):
    cfg = _config(args).validate()
    manifest = P.run_pipeline(cfg, args.out)
    print(f"manifest: {len(manifest['entries'])} entries in {args.out}")


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vert", description="Verifiability tuning at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI file overlaid on the preset")
        p.add_argument("--preset", default="hard-digit", choices=("hard-digit", "spurious-patch"))
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic dataset file")
    p.add_argument("--kind", choices=("hard-digit", "spurious-patch"))
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command("train-baseline", cmd_train_baseline, "train the black-box classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    def vert_flags(p):
        p.add_argument("--q", choices=P.Q_KINDS)
        p.add_argument("--k", type=int)
        p.add_argument("--u", type=int)
        p.add_argument("--lambda1", type=float)

    p = command("tune", cmd_tune, "verifiability-tune a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    vert_flags(p)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--out", required=True)

    p = command("attribute", cmd_attribute, "masks for the test split against a tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    vert_flags(p)
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "IOU, curves, faithfulness and verifiability")
    p.add_argument("--baseline", required=True)
    p.add_argument("--model", required=True, help="tuned checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)

    p = command("perturb-curve", cmd_perturb_curve, "one pixel-perturbation curve as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, default="vert-preround")
    p.add_argument("--masks")
    p.add_argument("--n-ks", type=int)
    p.add_argument("--out", required=True)

    p = command("manipulate", cmd_manipulate, "train a gradient-manipulated classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--corner-size", type=int)
    p.add_argument("--lambda-m", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--out", required=True)

    p = command("ablate-scale", cmd_ablate_scale, "tune once per mask scale u")
    p.add_argument("--u-list", required=True, help="comma separated, e.g. 1,2,4,8")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="merge metrics and write the checksum manifest")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    p = command("pipeline", cmd_pipeline, "every stage into one run directory")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("VERT_THREADS")
    limiter = None
    try:
        if threads:
            if not threads.isdigit() or int(threads) < 1:
                raise ConfigError(f"VERT_THREADS must be a positive integer, got {threads!r}")
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(int(threads))
        args.fn(args)
        return EXIT_OK
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, UsageError, ShapeError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
