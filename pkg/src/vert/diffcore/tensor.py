"""Reverse-mode differentiation on numpy arrays.

Every op records its parents and a backward rule mapping the upstream
gradient to one gradient per parent.  Rules for the "nested" op subset are
written with Tensor ops themselves, so running them with graph recording
enabled yields a differentiable gradient (``grad(..., create_graph=True)``).
Ops outside that subset compute their backward in raw numpy and refuse to
take part in a nested pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError, UnsupportedOpError, UsageError

_state = {"record": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["record"]
    _state["record"] = False
    try:
        yield
    finally:
        _state["record"] = prev


@contextlib.contextmanager
def _recording(flag: bool):
    prev = _state["record"]
    _state["record"] = flag
    try:
        yield
    finally:
        _state["record"] = prev


def is_recording() -> bool:
    return _state["record"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "nested")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.nested = True

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        grads = _run_backward(order, self, Tensor(np.ones_like(self.data)), create_graph=False)
        for node in order:
            if node._backward is None and node.requires_grad:
                g = grads.get(id(node))
                if g is None:
                    continue
                node.grad = g.data.copy() if node.grad is None else node.grad + g.data

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str, nested: bool = True) -> Tensor:
    out = Tensor(data)
    if _state["record"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
        out.nested = nested
    return out


# -- graph traversal ---------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(order, root, seed, create_graph):
    grads: dict[int, Tensor] = {id(root): seed}
    with _recording(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if create_graph and not node.nested:
                raise UnsupportedOpError(
                    f"op '{node.op}' is not in the nested-differentiable subset")
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    return grads


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False,
         grad_output=None) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the returned tensors are themselves part of a
    graph and can be differentiated again; every op on the path must then
    belong to the nested subset, otherwise UnsupportedOpError is raised.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise UsageError(f"grad() of a non-scalar (shape {output.shape}) needs grad_output")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    order = _toposort(output)
    grads = _run_backward(order, output, seed, create_graph)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(Tensor(np.zeros_like(x.data)) if g is None else g)
    return out


# -- broadcasting helpers ----------------------------------------------------

def unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(neg(g), b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
                            unbroadcast(mul(g, a), b.shape) if b.requires_grad else None),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), back, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise UsageError("power() takes a constant exponent")
    p = float(p)
    if p == 2.0:
        return mul(a, a)
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, out),), "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), lambda g: (div(g, mul(2.0, out)),), "sqrt")
    return out


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(_sigmoid_np(a.data), (a,), lambda g: (mul(g, mul(out, sub(1.0, out))),),
                "sigmoid")
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = (a.data > 0).astype(np.float64)
    return _make(a.data * gate, (a,), lambda g: (Tensor(g.data * gate),), "relu", nested=False)


def abs_(a) -> Tensor:
    """|a| with the subgradient sign(0) = 0."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (Tensor(g.data * s),), "abs", nested=False)


def smooth_abs(a, delta: float = 1e-6) -> Tensor:
    """sqrt(a^2 + delta^2) - delta; a twice-differentiable surrogate for |a|."""
    a = as_tensor(a)
    return sub(sqrt(add(mul(a, a), delta * delta)), delta)


def clamp_const(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (Tensor(g.data * inside),),
                 "clamp", nested=False)


# -- reductions and shape ops ------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def back(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


def softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (mul(out, sub(g, tsum(mul(g, out), axis=axis, keepdims=True))),)

    out = _make(y, (z,), back, "softmax")
    return out


def log_softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (sub(g, mul(softmax(z, axis), tsum(g, axis=axis, keepdims=True))),)

    return _make(shifted - lse, (z,), back, "log_softmax")


def upsample_blocks(m, u: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    m = as_tensor(m)
    if u == 1:
        return m
    lead, (h, w) = m.shape[:-2], m.shape[-2:]
    data = np.repeat(np.repeat(m.data, u, axis=-2), u, axis=-1)

    def back(g):
        g6 = reshape(g, lead + (h, u, w, u))
        nd = len(lead)
        return (tsum(g6, axis=(nd + 1, nd + 3)),)

    return _make(data, (m,), back, "upsample")


# -- convolution and pooling (first-order only) ------------------------------

def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. x: (N,C,H,W), w: (F,C,k,k), b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} are incompatible")
    n, c, h, wd = x.shape
    f, _, k, k2 = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k2 + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k2), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k2)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gd = g.data.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = Tensor((gd.T @ cols).reshape(w.shape)) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gd @ wmat).reshape(n, ho, wo, c, k, k2)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k2):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = Tensor(dxp[:, :, padding:padding + h, padding:padding + wd])
        grads = [gx, gw]
        if b is not None:
            grads.append(Tensor(g.data.sum(axis=(0, 2, 3))) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, back, "conv2d", nested=False)


def maxpool2d(x, s: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"maxpool size {s} does not divide {h}x{w}")
    v = x.data.reshape(n, c, h // s, s, w // s, s)
    out = v.max(axis=(3, 5))
    # route the gradient to the first maximum of each window
    flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
    winner = np.zeros(flat.shape)
    np.put_along_axis(winner, flat.argmax(axis=-1)[..., None], 1.0, axis=-1)
    winner = winner.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)

    def back(g):
        gx = winner * g.data[:, :, :, None, :, None]
        return (Tensor(gx.reshape(n, c, h, w)),)

    return _make(out, (x,), back, "maxpool", nested=False)


def avgpool2d(x, s: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"avgpool size {s} does not divide {h}x{w}")
    return mean(reshape(x, (n, c, h // s, s, w // s, s)), axis=(3, 5))


# -- losses ------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` (N, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return neg(mean(tsum(mul(log_softmax(logits), onehot), axis=1)))


def l1(a, axis=None) -> Tensor:
    return tsum(abs_(a), axis=axis)


def squared_norm(a, axis=None) -> Tensor:
    return tsum(mul(a, a), axis=axis)
