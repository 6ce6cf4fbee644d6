"""Numeric core: primitives, parameters, Adagrad, clipping, dropout, gradient checks."""
from .gradcheck import NonFiniteLoss, finite_diff_check, gradient_errors
from .ops import (
    Add,
    Affine,
    Concat,
    LogSoftmax,
    MatMul,
    MaxOverAxis,
    Mul,
    Relu,
    ShapeError,
    Sigmoid,
    Tanh,
    log_sigmoid,
    log_softmax,
    logsumexp,
    sigmoid,
    softplus,
)
from .params import (
    ADAGRAD_EPS,
    Adagrad,
    Parameter,
    adagrad_update,
    clip_global_norm,
    global_norm,
)
from .rng import (
    as_rng,
    dropout,
    dropout_mask,
    make_rng,
    rng_from_json,
    rng_state,
    rng_state_json,
    set_rng_state,
)

__all__ = [
    "ADAGRAD_EPS",
    "Adagrad",
    "Add",
    "Affine",
    "Concat",
    "LogSoftmax",
    "MatMul",
    "MaxOverAxis",
    "Mul",
    "NonFiniteLoss",
    "Parameter",
    "Relu",
    "ShapeError",
    "Sigmoid",
    "Tanh",
    "adagrad_update",
    "as_rng",
    "clip_global_norm",
    "dropout",
    "dropout_mask",
    "finite_diff_check",
    "global_norm",
    "gradient_errors",
    "log_sigmoid",
    "log_softmax",
    "logsumexp",
    "make_rng",
    "rng_from_json",
    "rng_state",
    "rng_state_json",
    "set_rng_state",
    "sigmoid",
    "softplus",
]
