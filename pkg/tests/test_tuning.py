import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import linear_model
from vert.datasets import TinyConfig, TinyProblem, dataset_moments
from vert.diffcore import mlp
from vert.diffcore import tensor as T
from vert.diffcore.gradcheck import numeric_grad
from vert.errors import ConfigError, ShapeError
from vert.qfa import AttributionMask, CounterfactualQ, MaskSet
from vert.qfa.masking import upsample_mask
from vert.training import TrainConfig, train_classifier
from vert.tuning import (VertConfig, VertResult, attribute, recommended_sparsity, train_loss,
                         verifiability_tune)


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


# -- training loss ---------------------------------------------------------------

def test_loss_vanishes_for_teacher_copy_and_full_masks():
    f_b = mlp((1, 4, 4), (6,), 3, seed=2)
    x = np.random.default_rng(0).normal(size=(5, 1, 4, 4))
    qs = np.random.default_rng(1).normal(size=(2, 5, 1, 4, 4))
    assert train_loss(f_b.copy(), f_b, x, np.ones((5, 4, 4)), qs, 1.0).item() == 0.0


def test_constant_student_has_zero_data_term():
    f_v = linear_model(np.zeros((4, 2)), (1, 2, 2), bias=[0.3, -0.2])
    x = np.random.default_rng(0).normal(size=(3, 1, 2, 2))
    m = np.random.default_rng(1).integers(0, 2, size=(3, 2, 2)).astype(float)
    qs = np.random.default_rng(2).normal(size=(1, 3, 1, 2, 2))
    assert train_loss(f_v, None, x, m, qs, 0.0).item() == 0.0


def test_two_pixel_loss_matches_hand_computation():
    a, b, c = 0.8, -1.3, 0.4
    f_v = linear_model([[a, 0.0], [b, 0.0]], (1, 1, 2))
    f_b = linear_model([[c, 0.0], [0.0, 0.0]], (1, 1, 2))
    x = np.array([[[[1.0, 2.0]]]])
    lam2 = 0.7
    loss = train_loss(f_v, f_b, x, np.array([[[1.0, 0.0]]]), np.zeros((1, 1, 1, 1, 2)), lam2)
    # kept pixel 0, pixel 1 replaced by 0; two-class softmax l1 gap is 2 |sigmoid gap|
    full, masked, teacher = sigmoid(a + 2 * b), sigmoid(a), sigmoid(c)
    expected = 2 * abs(full - masked) + lam2 * 2 * abs(teacher - full)
    assert abs(loss.item() - expected) < 1e-10


def test_loss_averages_over_draws():
    f_v = mlp((1, 2, 2), (3,), 2, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 1, 2, 2))
    m = np.zeros((2, 2, 2))
    qs = np.random.default_rng(1).normal(size=(3, 2, 1, 2, 2))
    each = [train_loss(f_v, None, x, m, qs[i:i + 1], 0.0).item() for i in range(3)]
    assert train_loss(f_v, None, x, m, qs, 0.0).item() == pytest.approx(np.mean(each), rel=1e-12)


def test_loss_differentiates_student_only():
    f_v, f_b = mlp((1, 2, 2), (3,), 2, seed=0), mlp((1, 2, 2), (3,), 2, seed=1)
    x = np.random.default_rng(0).normal(size=(2, 1, 2, 2))
    loss = train_loss(f_v, f_b, x, np.ones((2, 2, 2)), np.zeros((1, 2, 1, 2, 2)), 1.0)
    grads = T.grad(loss, f_v.parameters() + f_b.parameters())
    assert max(np.abs(g.data).max() for g in grads[len(f_v.parameters()):]) == 0.0
    assert max(np.abs(g.data).max() for g in grads[:len(f_v.parameters())]) > 0.0


# -- upsampling ----------------------------------------------------------------

def test_upsample_identity_and_blocks():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(upsample_mask(AttributionMask(m, u=1)), m)
    np.testing.assert_array_equal(upsample_mask(AttributionMask(m, u=2)), np.kron(np.eye(2), np.ones((2, 2))))
    with pytest.raises(ShapeError):
        upsample_mask(AttributionMask(m, u=2), shape=(1, 6, 6))


@given(st.integers(1, 4), st.integers(0, 1000))
def test_upsample_gradient_is_block_area(u, seed):
    w = np.random.default_rng(seed).uniform(size=(2, 3))
    m = T.Tensor(w, requires_grad=True)
    (g,) = T.grad(T.tsum(T.upsample_blocks(m, u)), [m])
    np.testing.assert_array_equal(g.data, np.full((2, 3), u * u))
    num = numeric_grad(lambda: float(np.kron(w, np.ones((u, u))).sum()), w)
    assert np.abs(num - u * u).max() < 1e-6


def test_upsample_needs_integer_scale():
    with pytest.raises(ShapeError):
        MaskSet.ones(2, (6, 6), 4).upsampled()


# -- sparsity summary --------------------------------------------------------------

def test_recommended_sparsity_examples():
    ones = MaskSet.ones(3, (4, 4), 2)
    assert recommended_sparsity(ones) == 16.0
    zeros = MaskSet(np.zeros((3, 2, 2)), np.ones((3, 2, 2), bool), u=2)
    assert recommended_sparsity(zeros) == 0.0
    mixed = MaskSet(np.array([[[1.0, 0.0], [0.0, 0.0]], [[1.0, 1.0], [1.0, 0.0]]]),
                    np.zeros((2, 2, 2), bool))
    assert recommended_sparsity(mixed) == 2.0


# -- configuration -----------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(k=0), dict(u=0), dict(lam1=-1.0), dict(lam2=-0.1), dict(eps=-1e-3)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        VertConfig(**bad).validate()


def test_scale_must_divide_image():
    f_b = mlp((1, 6, 6), (3,), 2)
    with pytest.raises(ConfigError):
        verifiability_tune(f_b, np.zeros((4, 1, 6, 6)), CounterfactualQ.dirac(0.0), VertConfig(u=4))


def test_empty_dataset_rejected():
    f_b = mlp((1, 4, 4), (3,), 2)
    with pytest.raises(ConfigError):
        verifiability_tune(f_b, np.zeros((0, 1, 4, 4)), CounterfactualQ.dirac(0.0), VertConfig(u=1))


# -- end-to-end on small problems --------------------------------------------------

@pytest.fixture(scope="module")
def tiny_teacher():
    tp = TinyProblem(TinyConfig(rows=3, cols=3, block=(1, 1), signal_noise=0.5))
    train = tp.sample(1500, np.random.default_rng(0))
    held = tp.sample(300, np.random.default_rng(1))
    f_b = mlp(tp.shape, (64,), 2, seed=0, moments=dataset_moments(train.x))
    train_classifier(f_b, train.x, train.y, TrainConfig(epochs=60))
    return f_b, train, held


def test_run_log_records_invariants(tiny_teacher):
    f_b, train, _ = tiny_teacher
    cfg = VertConfig(u=1, k=3, lam1=10.0, mask_epochs=20, model_epochs=2)
    result = verifiability_tune(f_b, train.x[:200], CounterfactualQ.pixel_normal(0.0, 0.3), cfg)
    assert isinstance(result, VertResult)
    assert result.log["init_params_equal"] and result.log["init_masks_ones"]
    assert [s["step"] for s in result.log["steps"]] == [1, 2, 3]
    assert all(s["zero_set_monotone"] for s in result.log["steps"])
    assert result.log["binary"] and np.isin(result.masks.weights, (0.0, 1.0)).all()
    assert len(result.masks) == 200 and len(result.continuous_masks) == 200
    assert result.model.descriptor() == f_b.descriptor()
    # the teacher is left untouched
    assert not np.array_equal(result.model.flat_params(), f_b.flat_params())


def test_heavy_model_distillation_keeps_predictions(tiny_teacher):
    f_b, train, held = tiny_teacher
    cfg = VertConfig(u=1, k=1, lam1=10.0, lam2=100.0, mask_epochs=30, model_epochs=5)
    result = verifiability_tune(f_b, train.x, CounterfactualQ.pixel_normal(0.0, 0.3), cfg)
    assert (result.model.predict(held.x) == f_b.predict(held.x)).mean() >= 0.99


def test_masks_avoid_region_the_teacher_ignores():
    rng = np.random.default_rng(3)
    w = np.zeros((16, 2))
    w[:, 0] = rng.normal(0, 1.5, size=16)
    w.reshape(4, 4, 2)[:, :2] = 0.0          # left half carries no weight
    f_b = linear_model(w, (1, 4, 4))
    x = rng.normal(size=(300, 1, 4, 4))
    cfg = VertConfig(u=1, k=2, lam1=20.0, mask_epochs=60, model_epochs=3)
    result = verifiability_tune(f_b, x, CounterfactualQ.pixel_normal(0.0, 1.0), cfg)
    zero_left = (result.masks.weights[:, :, :2] == 0).all(axis=(1, 2))
    assert zero_left.mean() >= 0.95
    assert result.masks.weights[:, :, 2:].mean() > 0.2      # the informative half is kept


def test_constraint_met_on_most_training_samples(tiny_teacher):
    f_b, train, _ = tiny_teacher
    cfg = VertConfig(u=1, k=1, lam1=10.0)
    result = verifiability_tune(f_b, train.x, CounterfactualQ.pixel_normal(0.0, 0.3), cfg)
    assert result.log["eps_satisfied"] >= 0.9


def test_held_out_attribution_is_binary_and_reproducible(tiny_teacher):
    f_b, _, held = tiny_teacher
    cfg = VertConfig(u=1, k=2, mask_epochs=20)
    q = CounterfactualQ.pixel_normal(0.0, 0.3)
    a, cont = attribute(f_b, held.x[:20], q, cfg)
    b, _ = attribute(f_b, held.x[:20], q, cfg)
    assert np.isin(a.weights, (0.0, 1.0)).all()
    np.testing.assert_array_equal(a.weights, b.weights)
    assert ((cont.weights >= 0) & (cont.weights <= 1)).all()
    other, _ = attribute(f_b, held.x[:20], q, dataclasses.replace(cfg, seed=9))
    assert other.weights.shape == a.weights.shape
