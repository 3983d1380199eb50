from .optim import OptimizerState, TauSchedule, adam_step, anneal_tau, noam_lr
from .tensor import (
    DivergenceError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    current_tape,
    embedding_lookup,
    exp,
    fresh_tape,
    layer_norm,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    relu,
    reshape,
    softmax_lastdim,
    straight_through_onehot,
    sub,
    sum_,
    transpose,
    unfold1d,
)

__all__ = [
    "DivergenceError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "TapeError",
    "TauSchedule",
    "Tensor",
    "adam_step",
    "add",
    "anneal_tau",
    "as_tensor",
    "backward",
    "clamp_min",
    "concat",
    "current_tape",
    "embedding_lookup",
    "exp",
    "fresh_tape",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "noam_lr",
    "relu",
    "reshape",
    "softmax_lastdim",
    "straight_through_onehot",
    "sub",
    "sum_",
    "transpose",
    "unfold1d",
]
