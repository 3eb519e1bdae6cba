import numpy as np
import pytest

from conftest import linear_model
from vert.datasets import DatasetConfig, dataset_moments, generate
from vert.diffcore import mlp, small_cnn
from vert.errors import ConfigError, UnsupportedOpError
from vert.evaluate import input_gradient, iou_stats
from vert.gradmanip import (ManipulationTarget, corner_cosine, corner_mass_ratio, gradient_penalty,
                            manipulation_report, train_manipulated)
from vert.training import TrainConfig, accuracy, train_classifier


def test_target_is_scaled_corner_block():
    t = ManipulationTarget((6, 6), corner=2, amplitude=0.5)
    expected = np.zeros((6, 6))
    expected[:2, :2] = 0.5
    np.testing.assert_array_equal(t.grid, expected)


@pytest.mark.parametrize("corner", [0, 6, 9])
def test_corner_must_fit_inside_image(corner):
    with pytest.raises(ConfigError):
        ManipulationTarget((6, 6), corner=corner)


def test_negative_penalty_weight_rejected():
    with pytest.raises(ConfigError):
        ManipulationTarget((6, 6), corner=2, lam_m=-1.0)


def test_penalty_of_linear_model_in_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2 * 9, 3))
    model = linear_model(w, (2, 3, 3))
    x = rng.normal(size=(4, 2, 3, 3))
    y = np.array([0, 2, 1, 2])
    t = ManipulationTarget((3, 3), corner=1, amplitude=0.7)
    expected = np.mean([((w[:, c].reshape(2, 3, 3) - t.grid) ** 2).sum() for c in y])
    assert gradient_penalty(model, x, y, t).item() == pytest.approx(expected, rel=1e-12)


def test_zero_weight_is_plain_training():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(64, 1, 4, 4)), rng.integers(2, size=64)
    cfg = TrainConfig(epochs=3)
    plain, manip = mlp((1, 4, 4), (6,), 2, seed=0), mlp((1, 4, 4), (6,), 2, seed=0)
    train_classifier(plain, x, y, cfg)
    train_manipulated(manip, x, y, ManipulationTarget((4, 4), corner=2, lam_m=0.0), cfg)
    np.testing.assert_array_equal(manip.flat_params(), plain.flat_params())


@pytest.mark.parametrize("make", [lambda: mlp((1, 4, 4), (6,), 2, "relu"),
                                  lambda: small_cnn((1, 4, 4), 2, 4, 2)])
def test_non_nested_models_refused(make):
    with pytest.raises(UnsupportedOpError):
        train_manipulated(make(), np.zeros((2, 1, 4, 4)), [0, 1], ManipulationTarget((4, 4), corner=2),
                          TrainConfig(epochs=1))


def test_corner_scores_for_a_corner_only_model():
    t = ManipulationTarget((4, 4), corner=2)
    w = np.zeros((16, 2))
    w[:, 0] = t.mask.ravel()
    model = linear_model(w, (1, 4, 4))
    x = np.ones((3, 1, 4, 4))
    assert corner_cosine(model, x, t) == pytest.approx(1.0)
    assert corner_mass_ratio(model, x, t) > 1e100


@pytest.fixture(scope="module")
def manipulated():
    ds = generate(DatasetConfig(image_size=12, signal_size=(4, 4), signal_stride=2, signal_keepout=4,
                                num_classes=2, seed=1), 2000)
    train, test = ds.split(0.75, seed=0)
    cfg = TrainConfig(epochs=40)
    target = ManipulationTarget((12, 12), corner=4, lam_m=1.0, amplitude=0.2)
    base = mlp(train.image_shape, (64,), 2, seed=0, moments=dataset_moments(train.x))
    manip = base.copy()
    train_classifier(base, train.x, train.y, cfg)
    train_manipulated(manip, train.x, train.y, target, cfg)
    return base, manip, test, target


def test_manipulation_keeps_accuracy(manipulated):
    base, manip, test, _ = manipulated
    assert accuracy(manip, test.x, test.y) >= accuracy(base, test.x, test.y) - 0.02


def test_gradients_move_into_corner(manipulated):
    base, manip, test, target = manipulated
    assert corner_mass_ratio(manip, test.x, target) >= 5.0
    assert corner_cosine(manip, test.x, target) >= 0.8
    assert corner_cosine(base, test.x, target) < 0.5
    base_iou = iou_stats(input_gradient(base, test.x), test.m)[0]
    assert iou_stats(input_gradient(manip, test.x), test.m)[0] < base_iou / 2


def test_report_layout_and_ground_truth_iou(manipulated):
    _, manip, test, _ = manipulated
    x, m = test.x[:40], test.m[:40]
    out = manipulation_report(manip, x, m, manip, m.astype(float), [0, 72, 144], smoothgrad_n=2)
    assert set(out) == {"vert-preround", "input-grad", "smoothgrad"}
    # ground-truth masks passed as the attribution score IOU 1 regardless of model
    assert out["vert-preround"]["iou_mean"] == 1.0
    assert [k for k, _ in out["input-grad"]["curve"]] == [0, 72, 144]
