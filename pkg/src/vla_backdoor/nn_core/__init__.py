from . import checkpoint
from .optim import AUX_GROUP_NAMES, GROUP_NAMES, Adam, ParamGroup, WarmupStepSchedule, collect_grads, sgd_step, zero_grads
from .tensor import (
    DTYPE,
    GraphError,
    NumericalError,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    cross_entropy,
    embedding,
    linear,
    log_softmax,
    matmul,
    mean,
    mean_pool,
    mse,
    mul,
    place,
    precision,
    active_dtype,
    relu,
    reshape,
    softmax,
    sq_norm,
    sub,
    tanh,
    transpose,
)
from .tensor import sum as tsum

__all__ = [
    "AUX_GROUP_NAMES", "Adam", "DTYPE", "GROUP_NAMES", "GraphError", "NumericalError", "ParamGroup", "Tensor",
    "WarmupStepSchedule", "add", "as_tensor", "backward", "checkpoint", "clip", "collect_grads",
    "concat", "cross_entropy", "embedding", "linear", "log_softmax", "matmul", "mean", "mean_pool",
    "mse", "mul", "place", "precision", "active_dtype", "relu", "reshape", "sgd_step", "softmax", "sq_norm", "sub", "tanh",
    "transpose", "tsum", "zero_grads",
]
