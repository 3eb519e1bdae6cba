"""Small random graphs for finite-difference checks, one per op, layer and loss.

Each case maps an RNG to ``(loss_fn, leaves)``.  Inputs to kinked ops (relu,
abs, max pooling) are kept well away from their kinks so central differences
with h = 1e-4 are valid.
"""
import numpy as np

from vert.diffcore import tensor as T
from vert.diffcore.layers import (AvgPool, Conv2d, Flatten, MaxPool, ReLU, Softplus,
                                  Standardize, mlp, small_cnn)
from vert.diffcore.layers import Affine
from vert.gradmanip import ManipulationTarget, gradient_penalty
from vert.qfa.masking import qfa_losses
from vert.tuning import train_loss


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def off_zero(rng, shape, gap=0.1):
    v = rng.normal(size=shape)
    return np.sign(v) * (np.abs(v) + gap)


def distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _project(out, rng):
    """Scalar sum(out * R) with a fixed random R so every output entry matters."""
    r = rng.normal(size=out.shape)
    return lambda t: T.tsum(T.mul(t, r))


def _unary(op, make):
    def case(rng):
        x = leaf(make(rng))
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return case


def _binary(op, make_a, make_b):
    def case(rng):
        a, b = leaf(make_a(rng)), leaf(make_b(rng))
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return case


def _layer(layer_fn, make_x):
    def case(rng):
        layer = layer_fn(rng)
        x = leaf(make_x(rng))
        for p in layer.params():
            p.data = rng.normal(size=p.shape)
        proj = _project(layer(x), rng)
        return (lambda: proj(layer(x))), [x, *layer.params()]
    return case


def _near_kink(model, x, margin=1e-2) -> bool:
    """True if a relu input or max-pool runner-up is within ``margin``, or a relu layer is dead."""
    h = T.Tensor(x)
    with T.no_grad():
        for layer in model.layers:
            if isinstance(layer, ReLU) and ((np.abs(h.data) < margin).any() or (h.data <= 0).all()):
                return True
            if isinstance(layer, MaxPool):
                n, c, hh, ww = h.shape
                s = layer.size
                win = h.data.reshape(n, c, hh // s, s, ww // s, s).transpose(0, 1, 2, 4, 3, 5)
                top2 = np.sort(win.reshape(n, c, hh // s, ww // s, s * s), axis=-1)[..., -2:]
                if (top2[..., 1] - top2[..., 0] < margin).any():
                    return True
            h = layer(h)
    return False


def _classifier(make_model, shape):
    def case(rng):
        while True:
            model = make_model(int(rng.integers(1 << 30)))
            xv = rng.normal(size=(3,) + shape)
            if not _near_kink(model, xv):
                break
        x = leaf(xv)
        labels = rng.integers(model.num_classes, size=3)
        return (lambda: T.cross_entropy(model.logits(x), labels)), [x, *model.parameters()]
    return case


def _cross_entropy(rng):
    z = leaf(rng.normal(size=(4, 3)))
    labels = rng.integers(3, size=4)
    return (lambda: T.cross_entropy(z, labels)), [z]


def _l1(rng):
    x = leaf(off_zero(rng, (3, 4)))
    return (lambda: T.l1(x)), [x]


def _squared_norm(rng):
    x = leaf(rng.normal(size=(3, 4)))
    return (lambda: T.squared_norm(x)), [x]


def _mask_loss(rng):
    f = mlp((1, 4, 4), (5,), 3, seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(2, 1, 4, 4))
    m = leaf(rng.uniform(0.2, 0.8, size=(2, 2, 2)))
    qs = rng.normal(size=(2, 2, 1, 4, 4))
    return (lambda: T.tsum(qfa_losses(f, x, m, qs, 3.0, u=2))), [m]


def _distill_loss(rng):
    f_v = mlp((1, 4, 4), (5,), 3, seed=int(rng.integers(1 << 30)))
    fb_x = rng.dirichlet(np.ones(3), size=3)
    x = rng.normal(size=(3, 1, 4, 4))
    m = rng.integers(0, 2, size=(3, 2, 2)).astype(float)
    qs = rng.normal(size=(2, 3, 1, 4, 4))
    return (lambda: train_loss(f_v, None, x, m, qs, 0.7, u=2, fb_x=fb_x)), f_v.parameters()


CASES = {
    "add": _binary(T.add, lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(4,))),
    "sub": _binary(T.sub, lambda r: r.normal(size=(2, 1, 3)), lambda r: r.normal(size=(2, 4, 3))),
    "mul": _binary(T.mul, lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(3, 1))),
    "div": _binary(T.div, lambda r: r.normal(size=(3, 4)), lambda r: r.uniform(0.5, 2.0, size=(4,))),
    "matmul": _binary(T.matmul, lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(4, 2))),
    "power": _unary(lambda x: T.power(x, 1.5), lambda r: r.uniform(0.5, 2.0, size=(5,))),
    "exp": _unary(T.exp, lambda r: r.normal(size=(5,))),
    "log": _unary(T.log, lambda r: r.uniform(0.5, 2.0, size=(5,))),
    "sqrt": _unary(T.sqrt, lambda r: r.uniform(0.5, 2.0, size=(5,))),
    "sigmoid": _unary(T.sigmoid, lambda r: r.normal(size=(5,))),
    "softplus": _unary(T.softplus, lambda r: 3 * r.normal(size=(5,))),
    "relu": _unary(T.relu, lambda r: off_zero(r, (6,))),
    "abs": _unary(T.abs_, lambda r: off_zero(r, (6,))),
    "smooth_abs": _unary(lambda x: T.smooth_abs(x, 0.1), lambda r: r.normal(size=(6,))),
    "sum_axis": _unary(lambda x: T.tsum(x, axis=1, keepdims=True), lambda r: r.normal(size=(2, 3, 2))),
    "mean_axes": _unary(lambda x: T.mean(x, axis=(0, 2)), lambda r: r.normal(size=(2, 3, 2))),
    "reshape": _unary(lambda x: T.reshape(x, (3, 4)), lambda r: r.normal(size=(2, 6))),
    "transpose": _unary(lambda x: T.transpose(x, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 2))),
    "softmax": _unary(T.softmax, lambda r: r.normal(size=(3, 4))),
    "log_softmax": _unary(T.log_softmax, lambda r: r.normal(size=(3, 4))),
    "upsample": _unary(lambda x: T.upsample_blocks(x, 2), lambda r: r.normal(size=(2, 2, 3))),
    "conv2d": _binary(lambda x, w: T.conv2d(x, w, padding=1), lambda r: r.normal(size=(2, 2, 4, 4)),
                      lambda r: r.normal(size=(3, 2, 3, 3))),
    "maxpool2d": _unary(lambda x: T.maxpool2d(x, 2), lambda r: distinct(r, (2, 1, 4, 4))),
    "avgpool2d": _unary(lambda x: T.avgpool2d(x, 2), lambda r: r.normal(size=(2, 2, 4, 4))),
    "layer_affine": _layer(lambda r: Affine(5, 3, r), lambda r: r.normal(size=(2, 5))),
    "layer_conv2d": _layer(lambda r: Conv2d(2, 3, 3, 1, r), lambda r: r.normal(size=(2, 2, 4, 4))),
    "layer_standardize": _layer(lambda r: Standardize(r.normal(size=2), r.uniform(0.5, 2, size=2)),
                                lambda r: r.normal(size=(2, 2, 3, 3))),
    "layer_flatten": _layer(lambda r: Flatten(), lambda r: r.normal(size=(2, 2, 3))),
    "layer_relu": _layer(lambda r: ReLU(), lambda r: off_zero(r, (2, 5))),
    "layer_softplus": _layer(lambda r: Softplus(), lambda r: r.normal(size=(2, 5))),
    "layer_maxpool": _layer(lambda r: MaxPool(2), lambda r: distinct(r, (1, 2, 4, 4))),
    "layer_avgpool": _layer(lambda r: AvgPool(2), lambda r: r.normal(size=(1, 2, 4, 4))),
    "mlp_softplus": _classifier(lambda s: mlp((1, 3, 3), (4,), 3, "softplus", seed=s), (1, 3, 3)),
    "cnn_relu": _classifier(lambda s: small_cnn((1, 4, 4), 2, 4, 3, seed=s), (1, 4, 4)),
    "cross_entropy": _cross_entropy,
    "l1": _l1,
    "squared_norm": _squared_norm,
    "mask_loss": _mask_loss,
    "distill_loss": _distill_loss,
}


def nested_case(rng):
    """Gradient-manipulation penalty as a function of the parameters of a softplus MLP."""
    model = mlp((1, 3, 3), (4,), 2, "softplus", seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(3, 1, 3, 3))
    y = rng.integers(2, size=3)
    target = ManipulationTarget((3, 3), corner=1, lam_m=1.0, amplitude=float(rng.uniform(0.1, 1.0)))
    return (lambda: gradient_penalty(model, x, y, target)), model.parameters()
