"""Differentiable operations on :class:`~xfuse.autograd.Tensor`.

Each op computes its forward value with :mod:`xfuse.core` and, when a tape
is active and some input needs a gradient, records a closure that maps the
output gradient to input gradients.
"""
from __future__ import annotations

import numpy as np

from . import core
from .autograd import Tensor, current_tape


def tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def _result(data, inputs: tuple[Tensor, ...], op: str, backward) -> Tensor:
    for t in inputs:
        if t.requires_grad:
            break
    else:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (unbroadcast(g, a.shape), -unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _result(out, (a, b), "div",
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = tensor(a)
    return _result(a.data ** p, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def square(a) -> Tensor:
    a = tensor(a)
    return _result(a.data ** 2, (a,), "square", lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    """|a|, with subgradient 0 at the kink."""
    a = tensor(a)
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = tensor(a), tensor(b)
    return _result(np.where(cond, a.data, b.data), (a, b), "where",
                   lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                              unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ----------------------------------------------------------------------------
# reductions and reshaping


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def concat(items, axis: int) -> Tensor:
    items = tuple(tensor(t) for t in items)
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _result(np.concatenate([t.data for t in items], axis=axis), items, "concat",
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_slice(a, key) -> Tensor:
    """Basic-slicing view ``a[key]``."""
    a = tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _result(a.data[key].copy(), (a,), "slice", backward)


# ----------------------------------------------------------------------------
# linear algebra and activations


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = core.matmul(a.data, b.data)
    return _result(out, (a, b), "matmul",
                   lambda g: (unbroadcast(g @ _swap(b.data), a.shape),
                              unbroadcast(_swap(a.data) @ g, b.shape)))


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    y = core.softmax(a.data, axis=axis)
    return _result(y, (a,), "softmax",
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def re_softmax(a, axis: int = -1) -> Tensor:
    return softmax(neg(a), axis=axis)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply the affine pair."""
    x = tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        n = x.shape[-1]
        return (inv / n * (n * g - g.sum(-1, keepdims=True)
                           - xhat * (g * xhat).sum(-1, keepdims=True)),)

    y = _result(xhat, (x,), "layer_norm", backward)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def relu(a) -> Tensor:
    a = tensor(a)
    return _result(np.maximum(a.data, 0.0), (a,), "relu", lambda g: (g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    y = core.sigmoid(a.data)
    return _result(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    a = tensor(a)
    return _result(core.gelu(a.data), (a,), "gelu", lambda g: (g * core.gelu_grad(a.data),))


# ----------------------------------------------------------------------------
# image operations


def conv2d(x, weight, bias=None, stride: int = 1, padding="reflect") -> Tensor:
    x, weight = tensor(x), tensor(weight)
    inputs = (x, weight) if bias is None else (x, weight, tensor(bias))
    bias_data = None if bias is None else inputs[2].data
    if current_tape() is None or not any(t.requires_grad for t in inputs):
        return _result(core.conv2d(x.data, weight.data, bias_data, stride, padding), inputs, "conv2d", None)
    out, cols = core.conv2d(x.data, weight.data, bias_data, stride, padding, keep_cols=True)

    def backward(g):
        dx, dw, db = core.conv2d_backward(g, x.data, weight.data, stride, padding,
                                          need_input=x.requires_grad, cols=cols)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _result(out, inputs, "conv2d", backward)


def filter2d(x, kernel, padding="reflect") -> Tensor:
    x = tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    return _result(core.filter2d(x.data, kernel, padding), (x,), "filter2d",
                   lambda g: (core.filter2d_backward(g, x.shape, kernel, padding),))


def mean_filter(x, k: int, padding: str = "reflect") -> Tensor:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"mean filter size must be a positive odd integer, got {k}")
    return filter2d(x, np.full((k, k), 1.0 / (k * k)), padding)


def maxpool2(x) -> Tensor:
    x = tensor(x)
    return _result(core.maxpool2(x.data), (x,), "maxpool2",
                   lambda g: (core.maxpool2_backward(g, x.data),))


def upsample2(x) -> Tensor:
    x = tensor(x)
    return _result(core.upsample2(x.data), (x,), "upsample2",
                   lambda g: (core.upsample2_backward(g),))


def cyclic_shift(x, dy: int, dx: int) -> Tensor:
    x = tensor(x)
    return _result(core.cyclic_shift(x.data, dy, dx), (x,), "cyclic_shift",
                   lambda g: (core.cyclic_shift(g, -dy, -dx),))


def to_tokens(fmap) -> Tensor:
    """(N,C,H,W) -> (N,H*W,C)."""
    fmap = tensor(fmap)
    N, C, H, W = fmap.shape
    return transpose(reshape(fmap, (N, C, H * W)), (0, 2, 1))


def from_tokens(tokens, H: int, W: int) -> Tensor:
    tokens = tensor(tokens)
    N, n, C = tokens.shape
    if n != H * W:
        raise core.ShapeError(f"{n} tokens cannot fill a {H}x{W} grid")
    return reshape(transpose(tokens, (0, 2, 1)), (N, C, H, W))


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


# ----------------------------------------------------------------------------
# operator sugar on Tensor

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__rmatmul__ = lambda self, o: matmul(o, self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
