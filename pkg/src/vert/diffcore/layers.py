"""Layer zoo and the Classifier container.

A Classifier is described by a JSON-serialisable architecture descriptor so
that checkpoints can rebuild it without pickling code.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from ..errors import ShapeError, UsageError
from . import tensor as T
from .tensor import Tensor, no_grad


class Layer:
    kind = "layer"
    nested = True

    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"type": self.kind}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x: Tensor) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Standardize(Layer):
    """Fixed per-channel (x - mean) / std; the constants are not trained."""

    kind = "standardize"

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(std, dtype=np.float64))
        if self.mean.shape != self.std.shape or (self.std <= 0).any():
            raise ShapeError("standardize needs matching mean/std with std > 0")

    def __call__(self, x: Tensor) -> Tensor:
        shape = (-1,) + (1,) * (x.ndim - 2)
        return T.mul(T.sub(x, self.mean.reshape(shape)), 1.0 / self.std.reshape(shape))

    def describe(self):
        return {"type": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


class Affine(Layer):
    kind = "affine"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.W = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"affine expects (N, {self.n_in}), got {x.shape}")
        return T.add(T.matmul(x, self.W), self.b)

    def params(self):
        return [self.W, self.b]

    def describe(self):
        return {"type": self.kind, "in": self.n_in, "out": self.n_out}

    def out_shape(self, in_shape):
        return (self.n_out,)


class Conv2d(Layer):
    kind = "conv2d"
    nested = False

    def __init__(self, c_in: int, c_out: int, k: int = 3, padding: int = 1,
                 rng: np.random.Generator | None = None):
        self.c_in, self.c_out, self.k, self.padding = c_in, c_out, k, padding
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * k * k
        self.W = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.W, self.b, padding=self.padding)

    def params(self):
        return [self.W, self.b]

    def describe(self):
        return {"type": self.kind, "in": self.c_in, "out": self.c_out, "k": self.k,
                "padding": self.padding}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (self.c_out, h + 2 * self.padding - self.k + 1, w + 2 * self.padding - self.k + 1)


class ReLU(Layer):
    kind = "relu"
    nested = False

    def __call__(self, x):
        return T.relu(x)


class Softplus(Layer):
    kind = "softplus"

    def __call__(self, x):
        return T.softplus(x)


class MaxPool(Layer):
    kind = "maxpool"
    nested = False

    def __init__(self, size: int = 2):
        self.size = size

    def __call__(self, x):
        return T.maxpool2d(x, self.size)

    def describe(self):
        return {"type": self.kind, "size": self.size}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)


class AvgPool(MaxPool):
    kind = "avgpool"
    nested = True

    def __call__(self, x):
        return T.avgpool2d(x, self.size)


_SIMPLE = {"flatten": Flatten, "relu": ReLU, "softplus": Softplus}


class Classifier:
    """Sequence of layers ending in C logits; ``__call__`` returns softmax probabilities."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"architecture ends in shape {shape}, expected ({self.num_classes},)")

    # -- evaluation --------------------------------------------------------
    def _check(self, x: Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected batch of {self.input_shape}, got {x.shape}")

    def logits(self, x) -> Tensor:
        x = T.as_tensor(x)
        self._check(x)
        h = x
        for layer in self.layers:
            h = layer(h)
        return h

    def __call__(self, x) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)

    def predict_proba(self, x, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with no_grad():
            out = [self(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    # -- parameters --------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    @property
    def nested_ok(self) -> bool:
        return all(layer.nested for layer in self.layers)

    def flat_params(self) -> np.ndarray:
        ps = self.parameters()
        return np.concatenate([p.data.ravel() for p in ps]) if ps else np.zeros(0)

    def load_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        n = sum(p.size for p in self.parameters())
        if flat.size != n:
            raise ShapeError(f"expected {n} parameters, got {flat.size}")
        i = 0
        for p in self.parameters():
            p.data = flat[i:i + p.size].reshape(p.shape).copy()
            i += p.size

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def descriptor(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [layer.describe() for layer in self.layers]}

    def copy(self) -> "Classifier":
        clone = build(self.descriptor())
        clone.load_flat(self.flat_params())
        return clone


def build(desc: dict | str, seed: int = 0) -> Classifier:
    """Instantiate a Classifier from a descriptor (dict or JSON text)."""
    if isinstance(desc, str):
        desc = json.loads(desc)
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for spec in desc["layers"]:
        kind = spec["type"]
        if kind in _SIMPLE:
            layers.append(_SIMPLE[kind]())
        elif kind == "standardize":
            layers.append(Standardize(spec["mean"], spec["std"]))
        elif kind == "affine":
            layers.append(Affine(spec["in"], spec["out"], rng))
        elif kind == "conv2d":
            layers.append(Conv2d(spec["in"], spec["out"], spec.get("k", 3), spec.get("padding", 1), rng))
        elif kind == "maxpool":
            layers.append(MaxPool(spec.get("size", 2)))
        elif kind == "avgpool":
            layers.append(AvgPool(spec.get("size", 2)))
        else:
            raise UsageError(f"unknown layer type {kind!r}")
    return Classifier(layers, desc["input_shape"], desc["num_classes"])


def _standardize(input_shape, moments) -> list[dict]:
    if moments is None:
        return []
    mean, std = (np.broadcast_to(np.asarray(v, dtype=np.float64), (input_shape[0],)) for v in moments)
    return [{"type": "standardize", "mean": mean.tolist(), "std": np.maximum(std, 1e-6).tolist()}]


def mlp(input_shape: Sequence[int], hidden: Sequence[int], num_classes: int,
        activation: str = "softplus", seed: int = 0, moments=None) -> Classifier:
    """[standardize] -> flatten -> (affine, activation)* -> affine, Kaiming-initialised
    from ``seed``.  ``moments`` = (mean, std) per channel adds the input standardisation."""
    if activation not in ("relu", "softplus"):
        raise UsageError(f"unsupported activation {activation!r}")
    sizes = [int(np.prod(input_shape)), *hidden, num_classes]
    layers: list[dict] = _standardize(input_shape, moments) + [{"type": "flatten"}]
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append({"type": "affine", "in": a, "out": b})
        layers.append({"type": activation})
    layers.pop()
    return build({"input_shape": list(input_shape), "num_classes": num_classes, "layers": layers}, seed)


def small_cnn(input_shape: Sequence[int], channels: int, hidden: int, num_classes: int,
              seed: int = 0, moments=None) -> Classifier:
    c, h, w = input_shape
    flat = channels * (h // 2) * (w // 2)
    layers = _standardize(input_shape, moments) + [{"type": "conv2d", "in": c, "out": channels, "k": 3, "padding": 1},
              {"type": "relu"}, {"type": "maxpool", "size": 2}, {"type": "flatten"},
              {"type": "affine", "in": flat, "out": hidden}, {"type": "relu"},
              {"type": "affine", "in": hidden, "out": num_classes}]
    return build({"input_shape": list(input_shape), "num_classes": num_classes, "layers": layers}, seed)


def forward(model: Classifier, batch) -> np.ndarray:
    """Class probabilities for a batch, without recording a graph."""
    batch = np.asarray(batch, dtype=np.float64)
    with no_grad():
        return model(batch).data
