"""Run configuration and the staged experiment pipeline.

A run directory holds every artifact of one (config, seed): the dataset
file, checkpoints, mask files, curves, reports and a manifest of sha256
checksums.  Nothing written depends on wall-clock time, so two runs with the
same config produce byte-identical files.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import os
import typing
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as D
from .datasets import Dataset, DatasetConfig, dataset_moments, flip_correlation, generate
from .diffcore import checkpoint, mlp
from .diffcore.layers import Classifier
from .errors import ConfigError, UsageError
from .evaluate import (EvalReport, _plain, eval_q, faithfulness, input_gradient, iou_stats,
                       mask_map, model_verifiability, perturbation_curve, random_map, smoothgrad,
                       train_input_dropout, write_curve_csv, write_strip)
from .gradmanip import ManipulationTarget, corner_cosine, corner_mass_ratio, manipulation_report, train_manipulated
from .qfa import CounterfactualQ, MaskSet, save_masks
from .training import TrainConfig, accuracy, train_classifier
from .tuning import VertConfig, attribute, verifiability_tune

log = logging.getLogger(__name__)

Q_KINDS = ("color-normal", "dirac")
LOCK_NAME = ".vert.lock"
MANIFEST_NAME = "manifest.json"
SUMMARY_NAMES = ("summary.json", "summary.csv")
# artifacts a complete pipeline run is expected to leave behind
EXPECTED = ("baseline.ckpt", "vert.ckpt", "masks_test.vertmask", "curves/vert-preround.csv", "report.json")


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "softplus"
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0


@dataclass
class EvalConfig:
    n_ks: int = 21                  # evenly spaced k from 0 to the pixel count
    smoothgrad_n: int = 25
    smoothgrad_sigma: float | None = None
    input_dropout: bool = True
    dropout_rate: float = 0.9
    n_strips: int = 4


@dataclass
class ManipConfig:
    enabled: bool = False
    corner: int = 8
    lam_m: float = 1.0
    amplitude: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    n: int = 2000
    train_frac: float = 0.8
    q: str = "color-normal"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vert: VertConfig = field(default_factory=VertConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    manip: ManipConfig = field(default_factory=ManipConfig)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "hard-digit":
            return cls(dataset=DatasetConfig(), vert=VertConfig(lam1=100.0, k=1),
                       manip=ManipConfig(enabled=True))
        if name == "spurious-patch":
            return cls(n=3000, dataset=DatasetConfig.spurious(),
                       model=ModelConfig(epochs=40, lr=3e-4),
                       vert=VertConfig(lam1=100.0, k=2, model_lr=3e-4),
                       eval=EvalConfig(input_dropout=False))
        raise ConfigError(f"unknown preset {name!r}; choose hard-digit or spurious-patch")

    def seeded(self) -> "RunConfig":
        """Copy with every component seed taken from the global one."""
        return dataclasses.replace(self, dataset=dataclasses.replace(self.dataset, seed=self.seed),
                                   vert=dataclasses.replace(self.vert, seed=self.seed))

    def train_config(self) -> TrainConfig:
        m = self.model
        return TrainConfig(epochs=m.epochs, lr=m.lr, batch_size=m.batch_size,
                           weight_decay=m.weight_decay, seed=self.seed)

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        n = self.dataset.image_size
        self.vert.validate((n, n))
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must lie in (0, 1)")
        if self.q not in Q_KINDS:
            raise ConfigError(f"q must be one of {Q_KINDS}, got {self.q!r}")
        if self.model.activation not in ("softplus", "relu"):
            raise ConfigError(f"unsupported activation {self.model.activation!r}")
        if self.model.epochs < 0 or self.model.lr <= 0 or self.model.batch_size < 1:
            raise ConfigError("model epochs >= 0, lr > 0 and batch_size >= 1 required")
        if self.eval.n_ks < 2 or self.eval.smoothgrad_n < 1:
            raise ConfigError("eval n_ks >= 2 and smoothgrad_n >= 1 required")
        if not 0.0 < self.eval.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in (0, 1)")
        if self.manip.enabled:
            if self.model.activation != "softplus":
                raise ConfigError("gradient manipulation needs the softplus MLP")
            ManipulationTarget((n, n), self.manip.corner, self.manip.lam_m, self.manip.amplitude)
        return self


# -- INI round trip -------------------------------------------------------------

_SECTIONS = ("dataset", "model", "vert", "eval", "manip")
_RUN_KEYS = ("seed", "n", "train_frac", "q")
_DERIVED = {"dataset": ("seed",), "vert": ("seed",)}


def _coerce(name: str, text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if origin is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        if hint in (int, float, str):
            return hint(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{name}: unsupported field type {hint}")


def _apply(obj, section: str, items: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)} - set(_DERIVED.get(section, ()))
    changes = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"unknown key [{section}] {key}")
        changes[key] = _coerce(f"[{section}] {key}", text, hints[key])
    return dataclasses.replace(obj, **changes)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay an INI document on ``base`` (or on the preset named in [run])."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    for name in parser.sections():
        if name not in ("run",) + _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
    run = dict(parser["run"]) if parser.has_section("run") else {}
    preset = run.pop("preset", None)
    cfg = base or RunConfig.preset(preset or "hard-digit")
    if preset and base is not None:
        cfg = RunConfig.preset(preset)
    hints = typing.get_type_hints(RunConfig)
    for key, text in run.items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key [run] {key}")
        cfg = dataclasses.replace(cfg, **{key: _coerce(f"[run] {key}", text, hints[key])})
    for name in _SECTIONS:
        if parser.has_section(name):
            cfg = dataclasses.replace(cfg, **{name: _apply(getattr(cfg, name), name, dict(parser[name]))})
    return cfg.seeded()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(), base)


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(int(a)) for a in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {k: _ini_value(getattr(cfg, k)) for k in _RUN_KEYS}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        skip = _DERIVED.get(name, ())
        parser[name] = {f.name: _ini_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if f.name not in skip}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- run directory helpers ----------------------------------------------------------

@contextmanager
def run_lock(out: Path):
    """Exclusive ownership of a run directory for the duration of the block."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_q(kind: str, x) -> CounterfactualQ:
    if kind == "color-normal":
        return CounterfactualQ.color_normal(*dataset_moments(x))
    if kind == "dirac":
        return eval_q(x)
    raise ConfigError(f"q must be one of {Q_KINDS}, got {kind!r}")


def k_grid(n_pixels: int, n_ks: int) -> np.ndarray:
    return np.unique(np.linspace(0, n_pixels, n_ks).round().astype(int))


def new_baseline(cfg: RunConfig, train: Dataset) -> Classifier:
    m = cfg.model
    return mlp(train.image_shape, m.hidden, train.num_classes, m.activation, seed=cfg.seed,
               moments=dataset_moments(train.x))


def split(cfg: RunConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    return ds.split(cfg.train_frac, seed=cfg.seed)


def preround_path(masks_path) -> Path:
    p = Path(masks_path)
    return p.with_name(p.stem + ".preround.npy")


def save_mask_pair(path: Path, binary: MaskSet, continuous: MaskSet):
    save_masks(path, binary)
    with open(preround_path(path), "wb") as fh:
        np.save(fh, continuous.weights.astype("<f8"), allow_pickle=False)


# -- stages ----------------------------------------------------------------------

def stage_data(cfg: RunConfig, out: Path) -> Dataset:
    ds = generate(cfg.dataset, cfg.n)
    D.save(out / "data.vertdata", ds)
    return ds


def stage_baseline(cfg: RunConfig, ds: Dataset, out: Path) -> Classifier:
    train, test = split(cfg, ds)
    f_b = new_baseline(cfg, train)
    trace = train_classifier(f_b, train.x, train.y, cfg.train_config())
    checkpoint.save(out / "baseline.ckpt", f_b)
    info = {"test_accuracy": accuracy(f_b, test.x, test.y), "train_accuracy": accuracy(f_b, train.x, train.y),
            "loss_trace": trace}
    if test.patched_classes:
        info["flipped_accuracy"] = accuracy(f_b, flip_correlation(test).x, test.y)
    write_json(out / "baseline.json", info)
    log.info("baseline test accuracy %.4f", info["test_accuracy"])
    return f_b


def stage_tune(cfg: RunConfig, f_b: Classifier, train: Dataset, out: Path, name: str = "vert"):
    q = make_q(cfg.q, train.x)
    result = verifiability_tune(f_b, train.x, q, cfg.vert)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / f"{name}.ckpt", result.model)
    save_mask_pair(out / "masks_train.vertmask", result.masks, result.continuous_masks)
    write_json(out / f"{name}_log.json", {"q": q.describe(), "config": dataclasses.asdict(cfg.vert), **result.log})
    return result


def stage_attribute(cfg: RunConfig, f_v: Classifier, train: Dataset, test: Dataset, out: Path):
    q = make_q(cfg.q, train.x)
    binary, continuous = attribute(f_v, test.x, q, cfg.vert)
    save_mask_pair(out / "masks_test.vertmask", binary, continuous)
    return binary, continuous


def baseline_maps(cfg: RunConfig, f_b: Classifier, test: Dataset) -> dict:
    return {"input-grad": input_gradient(f_b, test.x),
            "smoothgrad": smoothgrad(f_b, test.x, cfg.eval.smoothgrad_n, cfg.eval.smoothgrad_sigma, cfg.seed),
            "random": random_map(test.m.shape, cfg.seed)}


def stage_eval(cfg: RunConfig, f_b: Classifier, f_v: Classifier, train: Dataset, test: Dataset,
               binary: MaskSet, continuous: MaskSet, out: Path) -> EvalReport:
    """IOU, perturbation curves, faithfulness and verifiability on the test split.

    The VerT curve is measured on the tuned model and the gradient baselines
    on the black box they explain.
    """
    q_eval = eval_q(train.x)
    ks = k_grid(test.m.shape[1] * test.m.shape[2], cfg.eval.n_ks)
    maps = {"vert-preround": (f_v, mask_map(continuous)),
            **{k: (f_b, v) for k, v in baseline_maps(cfg, f_b, test).items()},
            "ground-truth": (f_b, mask_map(test.m.astype(np.float64), "ground-truth"))}
    report = EvalReport(config={"run": _plain(dataclasses.asdict(cfg)), "ks": ks.tolist(),
                                "curve_models": {k: ("tuned" if v[0] is f_v else "baseline") for k, v in maps.items()}})
    for name, (model, amap) in maps.items():
        mean, std, n = iou_stats(amap, test.m)
        report.iou[name] = {"mean": mean, "std": std, "n": n}
        curve = perturbation_curve(model, amap, test.x, q_eval, ks, cfg.seed)
        report.curves[name] = [[int(k), float(v)] for k, v in zip(ks, curve)]
        write_curve_csv(out / "curves" / f"{name}.csv", ks, curve)
    report.faithfulness = faithfulness(f_v, f_b, test.x, binary, q_eval, cfg.seed)
    report.verifiability = {"vert": model_verifiability(f_v, test.x, test.m, q_eval, seed=cfg.seed),
                            "baseline": model_verifiability(f_b, test.x, test.m, q_eval, seed=cfg.seed)}
    if cfg.eval.input_dropout:
        f_d = new_baseline(cfg, train)
        train_input_dropout(f_d, train.x, train.y, cfg.eval.dropout_rate, q_eval, cfg.train_config())
        checkpoint.save(out / "dropout.ckpt", f_d)
        report.verifiability["input-dropout"] = model_verifiability(f_d, test.x, test.m, q_eval, seed=cfg.seed)
        report.config["input_dropout_accuracy"] = accuracy(f_d, test.x, test.y)
    report.config["baseline_accuracy"] = accuracy(f_b, test.x, test.y)
    report.config["tuned_accuracy"] = accuracy(f_v, test.x, test.y)
    report.save(out / "report.json")
    write_strips(cfg, test, binary, q_eval, out / "strips")
    return report


def write_strips(cfg: RunConfig, test: Dataset, masks: MaskSet, q_eval: CounterfactualQ, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    q = q_eval.sample(np.random.default_rng(cfg.seed), test.x.shape[1:], 1)[0]
    w = masks.upsampled()
    for i in range(min(cfg.eval.n_strips, len(test))):
        write_strip(out / f"sample_{i:03d}.pgm", test.x[i], w[i], q)


def stage_manipulate(cfg: RunConfig, ds: Dataset, out: Path) -> dict:
    """Train a gradient-manipulated twin of the baseline, tune it, and compare."""
    train, test = split(cfg, ds)
    out.mkdir(parents=True, exist_ok=True)
    target = target_for(cfg, train)
    f_m = new_baseline(cfg, train)
    train_manipulated(f_m, train.x, train.y, target, cfg.train_config())
    checkpoint.save(out / "manipulated.ckpt", f_m)
    result = stage_tune(cfg, f_m, train, out, name="vert_manipulated")
    binary, continuous = stage_attribute(cfg, result.model, train, test, out)
    ks = k_grid(test.m.shape[1] * test.m.shape[2], cfg.eval.n_ks)
    table = manipulation_report(f_m, test.x, test.m, result.model, continuous, ks,
                                cfg.eval.smoothgrad_n, cfg.seed)
    q_eval = eval_q(train.x)
    summary = {"methods": table, "accuracy": accuracy(f_m, test.x, test.y),
               "corner_mass_ratio": corner_mass_ratio(f_m, test.x, target),
               "corner_cosine": corner_cosine(f_m, test.x, target),
               "faithfulness": list(faithfulness(result.model, f_m, test.x, binary, q_eval, cfg.seed)),
               "target": {"corner": target.corner, "lam_m": target.lam_m, "amplitude": target.amplitude}}
    write_json(out / "manip_report.json", summary)
    return summary


def target_for(cfg: RunConfig, ds: Dataset) -> ManipulationTarget:
    return ManipulationTarget(ds.image_shape[-2:], cfg.manip.corner, cfg.manip.lam_m, cfg.manip.amplitude)


def ablate_scale(cfg: RunConfig, u_list, out: Path) -> dict:
    """Tune once per mask scale u and record the test perturbation curve and strips."""
    cfg = cfg.seeded().validate()
    n = cfg.dataset.image_size
    ds = generate(cfg.dataset, cfg.n)
    train, test = split(cfg, ds)
    f_b = new_baseline(cfg, train)
    train_classifier(f_b, train.x, train.y, cfg.train_config())
    q_eval = eval_q(train.x)
    ks = k_grid(n * n, cfg.eval.n_ks)
    results, skipped = {}, []
    for u in u_list:
        if u < 1 or n % u:
            log.warning("skipping u=%d: does not divide %d", u, n)
            skipped.append(int(u))
            continue
        sub = dataclasses.replace(cfg, vert=dataclasses.replace(cfg.vert, u=int(u)))
        d = out / f"u{u}"
        d.mkdir(parents=True, exist_ok=True)
        result = verifiability_tune(f_b, train.x, make_q(cfg.q, train.x), sub.vert)
        binary, continuous = stage_attribute(sub, result.model, train, test, d)
        curve = perturbation_curve(result.model, mask_map(continuous), test.x, q_eval, ks, cfg.seed)
        write_curve_csv(d / "curve.csv", ks, curve)
        write_strips(sub, test, binary, q_eval, d / "strips")
        results[int(u)] = {"curve": [[int(k), float(v)] for k, v in zip(ks, curve)],
                           "iou": iou_stats(mask_map(continuous), test.m)[0],
                           "mean_kept": float(binary.upsampled().mean())}
    summary = {"scales": results, "skipped": skipped}
    write_json(out / "ablation.json", summary)
    return summary


# -- manifest ------------------------------------------------------------------------

def collect_metrics(run: Path) -> dict:
    merged = {}
    for name in ("baseline.json", "report.json", "manip/manip_report.json", "ablation.json"):
        p = run / name
        if p.is_file():
            merged[name] = json.loads(p.read_text())
    for name in ("vert_log.json", "manip/vert_manipulated_log.json"):
        p = run / name
        if p.is_file():
            full = json.loads(p.read_text())
            merged[name] = {k: v for k, v in full.items() if k != "steps"}
    return merged


def _flatten(prefix: str, obj, rows: list):
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, (int, float, str, bool)) or obj is None:
        rows.append((prefix, obj))


def write_report(run: Path) -> dict:
    """Merge metric files into summary.json/csv and write the checksum manifest.

    Checksums recorded by an earlier manifest that no longer match are listed
    under ``changed``; missing expected artifacts under ``missing``.
    """
    run = Path(run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    previous = {}
    old = run / MANIFEST_NAME
    if old.is_file():
        try:
            previous = {e["path"]: e["sha256"] for e in json.loads(old.read_text()).get("entries", [])}
        except (json.JSONDecodeError, KeyError, TypeError):
            log.warning("ignoring unreadable %s", old)
    has_artifacts = any(p.is_file() and p.name not in (MANIFEST_NAME, LOCK_NAME) for p in run.rglob("*"))
    if has_artifacts:
        metrics = collect_metrics(run)
        write_json(run / "summary.json", metrics)
        rows: list = []
        _flatten("", metrics, rows)
        with open(run / "summary.csv", "w") as fh:
            fh.write("key,value\n")
            for key, value in rows:
                fh.write(f"{key},{json.dumps(value)}\n")
    entries = []
    for p in sorted(run.rglob("*")):
        rel = p.relative_to(run).as_posix()
        if not p.is_file() or rel in (MANIFEST_NAME, LOCK_NAME):
            continue
        entries.append({"path": rel, "sha256": sha256(p), "bytes": p.stat().st_size})
    current = {e["path"]: e["sha256"] for e in entries}
    # the summaries are rewritten above, so only upstream artifacts can be tampered with
    changed = sorted(k for k, v in previous.items()
                     if k in current and current[k] != v and k not in SUMMARY_NAMES)
    missing = [name for name in EXPECTED if name not in current] if entries else []
    for name in missing:
        log.warning("missing artifact %s", name)
    for name in changed:
        log.warning("checksum mismatch for %s", name)
    manifest = {"entries": entries, "missing": missing, "changed": changed}
    write_json(run / MANIFEST_NAME, manifest)
    return manifest


# -- full pipeline ---------------------------------------------------------------------

def run_pipeline(cfg: RunConfig, out) -> dict:
    """Every stage in order inside a locked run directory; returns the manifest."""
    cfg = cfg.seeded().validate()
    out = Path(out)
    with run_lock(out):
        (out / "config.ini").write_text(dump_config(cfg))
        ds = stage_data(cfg, out)
        train, test = split(cfg, ds)
        f_b = stage_baseline(cfg, ds, out)
        result = stage_tune(cfg, f_b, train, out)
        binary, continuous = stage_attribute(cfg, result.model, train, test, out)
        stage_eval(cfg, f_b, result.model, train, test, binary, continuous, out)
        if cfg.manip.enabled:
            stage_manipulate(cfg, ds, out / "manip")
        return write_report(out)
