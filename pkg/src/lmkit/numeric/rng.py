"""Seeded randomness and dropout."""
from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """The single generator type used everywhere: counter-based Philox."""
    return np.random.Generator(np.random.Philox(int(seed)))


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def dropout_mask(shape, p: float, rng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = as_rng(rng).random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: np.ndarray, p: float, training: bool, seed=None):
    """Return (y, mask).  At inference, or with p == 0, y is x itself."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    mask = dropout_mask(x.shape, p, seed)
    return x * mask, mask


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.dtype.str, "data": [int(x) for x in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unplain(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["__array__"]))
        return {k: _unplain(v) for k, v in obj.items()}
    return obj


def rng_state_json(rng: np.random.Generator) -> dict:
    """Generator state with arrays turned into JSON-friendly lists."""
    return _plain(rng.bit_generator.state)


def rng_from_json(state: dict) -> np.random.Generator:
    rng = make_rng(0)
    rng.bit_generator.state = _unplain(state)
    return rng
