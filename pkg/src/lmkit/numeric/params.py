"""Parameters, Adagrad and global-norm clipping."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

ADAGRAD_EPS = 1e-8


class Parameter:
    """A value array with paired gradient and Adagrad accumulator."""

    __slots__ = ("name", "value", "grad", "accum")

    def __init__(self, value, name: str = ""):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.accum = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def adagrad_update(param: Parameter, lr: float, eps: float = ADAGRAD_EPS) -> Parameter:
    """accum += g*g; value -= lr * g / sqrt(accum + eps); grad cleared."""
    g = param.grad
    if g.ndim == 2 and g.shape[0] >= 512:
        # rows with zero gradient are left exactly as a dense update would leave them
        rows = np.flatnonzero(g.any(axis=1))
        if len(rows) < g.shape[0] // 2:
            gr = g[rows]
            acc = param.accum[rows] + gr * gr
            param.accum[rows] = acc
            param.value[rows] -= lr * gr / np.sqrt(acc + eps)
            g[rows] = 0.0
            return param
    param.accum += g * g
    param.value -= lr * g / np.sqrt(param.accum + eps)
    param.grad[...] = 0.0
    return param


def global_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))


def clip_global_norm(params: Iterable[Parameter], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    params = list(params)
    norm = global_norm(params)
    if not math.isfinite(max_norm) or norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


class Adagrad:
    """Adagrad over a parameter list with per-parameter learning-rate scales.

    ``initial_accumulator`` seeds every accumulator once, so the first update
    is ``lr * g / sqrt(init + g*g)`` rather than a full ``lr`` step of sign(g).
    Parameters whose name is in ``frozen`` keep their values; their gradients
    are still cleared.
    """

    def __init__(self, params, lr: float = 0.2, eps: float = ADAGRAD_EPS, initial_accumulator: float = 0.0,
                 lr_scale: dict | None = None, frozen=()):
        self.params = list(params)
        self.lr = lr
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.frozen = set(frozen)
        for p in self.params:
            p.accum[...] = initial_accumulator

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params if p.name not in self.frozen]

    def step(self) -> None:
        for p in self.params:
            if p.name in self.frozen:
                p.zero_grad()
            else:
                adagrad_update(p, self.lr * self.lr_scale.get(p.name, 1.0), self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
