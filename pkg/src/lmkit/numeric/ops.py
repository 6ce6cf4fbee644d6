"""Dense primitives with explicit forward and backward.

Each primitive is a small object: ``forward(*inputs)`` saves what the
backward needs and returns the output; ``backward(grad_out)`` consumes that
context exactly once and returns one gradient per input.  The functional
helpers at the bottom (``sigmoid``, ``log_softmax``, ...) are the same math
without the bookkeeping and are what the layers call in their fused
backward passes.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "MatMul",
    "Affine",
    "Add",
    "Mul",
    "Tanh",
    "Sigmoid",
    "Relu",
    "Concat",
    "MaxOverAxis",
    "LogSoftmax",
    "sigmoid",
    "log_sigmoid",
    "softplus",
    "log_softmax",
    "logsumexp",
]


class ShapeError(ValueError):
    pass


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def logsumexp(z, axis=-1, keepdims=False):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    return z - logsumexp(z, axis=axis, keepdims=True)


class Op:
    """Base class: one forward, then exactly one backward."""

    def __init__(self):
        self._ctx = None

    def _save(self, *items):
        self._ctx = items

    def _take(self):
        if self._ctx is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a pending forward")
        ctx, self._ctx = self._ctx, None
        return ctx

    def __call__(self, *inputs):
        return self.forward(*inputs)


class MatMul(Op):
    def forward(self, a, b):
        if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise _shape_error("matmul", a, b)
        self._save(a, b)
        return a @ b

    def backward(self, g):
        a, b = self._take()
        ga = g @ b.T
        a2 = a.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb


class Affine(Op):
    """y = x W + b with W of shape (in, out)."""

    def forward(self, x, w, b):
        if x.shape[-1] != w.shape[0]:
            raise _shape_error("affine", x, w)
        if b.shape != (w.shape[1],):
            raise _shape_error("affine bias", w, b)
        self._save(x, w)
        return x @ w + b

    def backward(self, g):
        x, w = self._take()
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        return g @ w.T, x2.T @ g2, g2.sum(axis=0)


class Add(Op):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise _shape_error("add", a, b)
        self._save(None)
        return a + b

    def backward(self, g):
        self._take()
        return g, g


class Mul(Op):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise _shape_error("mul", a, b)
        self._save(a, b)
        return a * b

    def backward(self, g):
        a, b = self._take()
        return g * b, g * a


class Tanh(Op):
    def forward(self, x):
        y = np.tanh(x)
        self._save(y)
        return y

    def backward(self, g):
        (y,) = self._take()
        return (g * (1.0 - y * y),)


class Sigmoid(Op):
    def forward(self, x):
        y = sigmoid(x)
        self._save(y)
        return y

    def backward(self, g):
        (y,) = self._take()
        return (g * y * (1.0 - y),)


class Relu(Op):
    def forward(self, x):
        mask = x > 0
        self._save(mask)
        return np.where(mask, x, 0.0)

    def backward(self, g):
        (mask,) = self._take()
        return (g * mask,)


class Concat(Op):
    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, *xs):
        ref = xs[0]
        ax = self.axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                x.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
            ):
                raise _shape_error("concat", ref, x)
        self._save([x.shape[ax] for x in xs])
        return np.concatenate(xs, axis=ax)

    def backward(self, g):
        (sizes,) = self._take()
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.axis))


class MaxOverAxis(Op):
    """Max along one axis; the gradient goes to the first maximal index."""

    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, x):
        arg = np.argmax(x, axis=self.axis)
        self._save(x.shape, arg)
        return np.take_along_axis(x, np.expand_dims(arg, self.axis), axis=self.axis).squeeze(self.axis)

    def backward(self, g):
        shape, arg = self._take()
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(arg, self.axis), np.expand_dims(g, self.axis), axis=self.axis)
        return (gx,)


class LogSoftmax(Op):
    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, z):
        y = log_softmax(z, axis=self.axis)
        self._save(y)
        return y

    def backward(self, g):
        (y,) = self._take()
        return (g - np.exp(y) * g.sum(axis=self.axis, keepdims=True),)
