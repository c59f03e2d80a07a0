from .optim import Adam, AdamState, adam_step
from .tensor import (
    Function,
    Tensor,
    as_tensor,
    concat,
    is_grad_enabled,
    l1_loss,
    layer_norm,
    matmul,
    mse,
    no_grad,
    parameter,
    softmax,
)

__all__ = [
    "Adam",
    "AdamState",
    "Function",
    "Tensor",
    "adam_step",
    "as_tensor",
    "concat",
    "is_grad_enabled",
    "l1_loss",
    "layer_norm",
    "matmul",
    "mse",
    "no_grad",
    "parameter",
    "softmax",
]
