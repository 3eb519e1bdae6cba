"""End-to-end acceptance checks.  Each test records one PASS/FAIL line that is
printed at the end of the session; run directly with ``python tests/test_acceptance.py``."""
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gradcases import CASES, nested_case
from vert.datasets import TinyConfig, TinyProblem, dataset_moments
from vert.diffcore.gradcheck import check
from vert.pipeline import RunConfig, run_pipeline
from vert.qfa import CounterfactualQ, brute_force_qfa, lfa_mask

pytestmark = pytest.mark.slow


class Record(dict):
    """Measured values for one criterion plus its wall clock."""

    def __init__(self):
        super().__init__()
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def line(self) -> str:
        parts = [f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.items()]
        return ", ".join(parts + [f"seconds={self.elapsed():.1f}"])


@contextmanager
def criterion(num, desc):
    """Record the outcome of the enclosed assertions under ``num``."""
    rec = Record()
    try:
        yield rec
    except BaseException:
        ACCEPTANCE[num] = (False, desc, rec.line())
        raise
    ACCEPTANCE[num] = (True, desc, rec.line())


def _json(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="session")
def hard_digit(tmp_path_factory):
    out = tmp_path_factory.mktemp("hard-digit")
    start = time.perf_counter()
    manifest = run_pipeline(RunConfig.preset("hard-digit"), out)
    return out, manifest, time.perf_counter() - start


@pytest.fixture(scope="session")
def spurious(tmp_path_factory):
    out = tmp_path_factory.mktemp("spurious")
    start = time.perf_counter()
    manifest = run_pipeline(RunConfig.preset("spurious-patch"), out)
    return out, manifest, time.perf_counter() - start


def test_gradients_match_finite_differences():
    with criterion(1, "gradients match central differences") as d:
        worst, worst_nested = 0.0, 0.0
        for name, case in CASES.items():
            for trial in range(100):
                worst = max(worst, check(*case(np.random.default_rng([trial, 1]))))
        for trial in range(100):
            worst_nested = max(worst_nested, check(*nested_case(np.random.default_rng([trial, 2]))))
        d.update(cases=len(CASES), max_rel=worst, nested_max_rel=worst_nested)
        assert worst < 1e-4 and worst_nested < 1e-3
        assert d.elapsed() < 60


def test_true_distractor_recovers_signal():
    with criterion(2, "true Q recovers the signal, mismatched Q does not") as d:
        tp = TinyProblem(TinyConfig())
        ds = tp.sample(200, np.random.default_rng(2024))
        true_q = CounterfactualQ.pixel_normal(0.0, tp.config.distractor_std)
        wrong_q = CounterfactualQ.pixel_normal(*dataset_moments(ds.x))
        hit_true, hit_wrong, size_true, size_wrong = [], [], [], []
        for i in range(len(ds)):
            a = brute_force_qfa(tp, ds.x[i], true_q, 0.05, seed=i)
            b = brute_force_qfa(tp, ds.x[i], wrong_q, 0.05, seed=i)
            hit_true.append(np.array_equal(a, ds.m[i]))
            hit_wrong.append(np.array_equal(b, ds.m[i]))
            size_true.append(a.sum())
            size_wrong.append(b.sum())
        d.update(d=tp.d, instances=len(ds), recovery_true=np.mean(hit_true), recovery_mismatched=np.mean(hit_wrong),
                 size_true=np.mean(size_true), size_mismatched=np.mean(size_wrong))
        assert tp.d <= 16 and len(ds) >= 200
        assert np.mean(hit_true) >= 0.95
        assert np.mean(hit_wrong) < np.mean(hit_true)
        assert np.mean(size_wrong) > np.mean(size_true)
        assert d.elapsed() < 600


def test_lfa_agrees_with_brute_force():
    with criterion(3, "lfa mask equals brute-force mask") as d:
        q = CounterfactualQ.pixel_normal(0.0, 0.3)
        agree, total, max_d = 0, 0, 0
        for rows, cols in ((2, 5), (3, 3)):
            tp = TinyProblem(TinyConfig(rows=rows, cols=cols))
            ds = tp.sample(25, np.random.default_rng(7))
            max_d = max(max_d, tp.d)
            for i in range(len(ds)):
                agree += np.array_equal(lfa_mask(tp, ds.x[i], q, 0.05, seed=i),
                                        brute_force_qfa(tp, ds.x[i], q, 0.05, seed=i))
                total += 1
        d.update(instances=total, max_d=max_d, agreement=agree / total)
        assert total == 50 and max_d <= 10
        assert agree == total
        assert d.elapsed() < 300


def test_spurious_baseline_relies_on_patch(spurious):
    with criterion(4, "spurious baseline accurate, collapses after flip") as d:
        out, _, seconds = spurious
        info = _json(out / "baseline.json")
        d.update(test_accuracy=info["test_accuracy"], flipped_accuracy=info["flipped_accuracy"],
                 pipeline_seconds=round(seconds, 1))
        assert info["test_accuracy"] >= 0.99
        assert info["flipped_accuracy"] <= 0.05
        assert seconds < 15 * 60


def test_tuned_models_are_faithful(hard_digit, spurious):
    with criterion(5, "tuned model agrees with the black box") as d:
        ok = True
        for name, (out, _, _) in (("hard", hard_digit), ("spurious", spurious)):
            r = _json(out / "report.json")
            d[f"{name}_original"] = r["faithfulness_original"]
            d[f"{name}_simplified"] = r["faithfulness_simplified"]
            ok &= r["faithfulness_original"] >= 0.95 and r["faithfulness_simplified"] >= 0.92
        assert ok


def test_verifiability_ordering(hard_digit):
    with criterion(6, "verifiability gap: tuned < baseline < input dropout") as d:
        v = _json(hard_digit[0] / "report.json")["verifiability"]
        d.update(tuned=v["vert"], baseline=v["baseline"], input_dropout=v["input-dropout"])
        assert v["vert"] < v["baseline"] < v["input-dropout"]


def test_iou_dominance(hard_digit, spurious):
    with criterion(7, "tuned-mask IOU beats gradient maps") as d:
        ok = True
        for name, (out, _, _) in (("hard", hard_digit), ("spurious", spurious)):
            iou = _json(out / "report.json")["iou"]
            vert = iou["vert-preround"]["mean"]
            d[f"{name}_vert"] = vert
            d[f"{name}_input_grad"] = iou["input-grad"]["mean"]
            d[f"{name}_smoothgrad"] = iou["smoothgrad"]["mean"]
            ok &= vert >= iou["input-grad"]["mean"] + 0.1 and vert >= iou["smoothgrad"]["mean"] + 0.1
            if name == "spurious":
                ok &= vert >= 0.6
        assert ok


def test_perturbation_curve_dominance(hard_digit, spurious):
    with criterion(8, "tuned-mask perturbation curve dominates") as d:
        ok = True
        for name, (out, _, _) in (("hard", hard_digit), ("spurious", spurious)):
            curves = _json(out / "report.json")["curves"]
            vert = np.array([v for _, v in curves["vert-preround"]])
            ok &= curves["vert-preround"][0] == [0, 1.0]
            for other in ("input-grad", "smoothgrad", "random"):
                frac = float(np.mean(vert >= np.array([v for _, v in curves[other]])))
                d[f"{name}_vs_{other}"] = frac
                ok &= frac >= 0.8
        assert ok


def test_manipulation_robustness(hard_digit):
    with criterion(9, "tuned masks survive gradient manipulation") as d:
        out = hard_digit[0]
        clean = _json(out / "report.json")["iou"]
        manip = _json(out / "manip" / "manip_report.json")
        acc = _json(out / "baseline.json")["test_accuracy"]
        grad_drop = 1 - manip["methods"]["input-grad"]["iou_mean"] / clean["input-grad"]["mean"]
        vert_drop = 1 - manip["methods"]["vert-preround"]["iou_mean"] / clean["vert-preround"]["mean"]
        d.update(input_grad_drop=grad_drop, vert_drop=vert_drop, clean_accuracy=acc,
                 manipulated_accuracy=manip["accuracy"])
        assert grad_drop >= 0.5
        assert vert_drop <= 0.2
        assert abs(manip["accuracy"] - acc) <= 0.02


def test_pipeline_is_deterministic(hard_digit, tmp_path):
    with criterion(10, "identical config and seed give identical manifests") as d:
        out, first, _ = hard_digit
        second = run_pipeline(RunConfig.preset("hard-digit"), tmp_path / "again")
        a = {e["path"]: e["sha256"] for e in first["entries"]}
        b = {e["path"]: e["sha256"] for e in second["entries"]}
        d.update(files=len(a), differing=sum(a.get(k) != v for k, v in b.items()) + len(set(a) ^ set(b)))
        assert a == b and len(a) > 0


def test_algorithmic_invariants(hard_digit, spurious):
    with criterion(11, "initialisation, rounding and constraint invariants") as d:
        ok = True
        for name, (out, _, _) in (("hard", hard_digit), ("spurious", spurious)):
            log = _json(out / "vert_log.json")
            steps_ok = all(s["zero_set_monotone"] for s in log["steps"])
            d[f"{name}_eps_satisfied"] = log["eps_satisfied"]
            ok &= log["init_params_equal"] and log["init_masks_ones"] and steps_ok and log["binary"]
            ok &= log["eps_satisfied"] >= 0.9
        assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
