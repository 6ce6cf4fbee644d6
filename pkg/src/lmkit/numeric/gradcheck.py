"""Central-difference gradient verification."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .params import Parameter


class NonFiniteLoss(FloatingPointError):
    pass


def _call(loss_fn):
    val = float(loss_fn())
    if not math.isfinite(val):
        raise NonFiniteLoss(f"loss is not finite: {val}")
    return val


def gradient_errors(loss_fn: Callable[[], float], params: Sequence[Parameter], eps: float = 1e-5):
    """Per-parameter arrays of relative error |a-n| / max(|a|, |n|, 1e-8).

    ``loss_fn`` must compute the loss and accumulate analytic gradients into
    the parameters' ``grad`` arrays; it must be deterministic.
    """
    for p in params:
        p.zero_grad()
    _call(loss_fn)
    analytic = [p.grad.copy() for p in params]
    out = {}
    for k, p in enumerate(params):
        flat = p.value.reshape(-1)
        num = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = _call(loss_fn)
            flat[j] = orig - eps
            down = _call(loss_fn)
            flat[j] = orig
            num[j] = (up - down) / (2.0 * eps)
        a = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        out[p.name or f"param{k}"] = (np.abs(a - num) / denom).reshape(p.shape)
    for p in params:
        p.zero_grad()
    return out


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Maximum relative gradient error over every element of ``params``."""
    errs = gradient_errors(loss_fn, params, eps)
    return max((float(e.max()) for e in errs.values() if e.size), default=0.0)
