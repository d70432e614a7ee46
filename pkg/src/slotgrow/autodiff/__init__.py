from .functional import cosine_similarity, pairwise_cosine
from .gradcheck import gradcheck, numerical_grad, relative_error
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    exp,
    expand_dims,
    getitem,
    gru_cell,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    tanh,
    transpose,
    window_mean,
)

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "cosine_similarity",
    "div",
    "exp",
    "expand_dims",
    "getitem",
    "gradcheck",
    "gru_cell",
    "is_grad_enabled",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numerical_grad",
    "pairwise_cosine",
    "power",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "sum_",
    "swapaxes",
    "tanh",
    "transpose",
    "window_mean",
]
