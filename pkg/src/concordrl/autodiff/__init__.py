"""Minimal reverse-mode autodiff engine (float64 numpy throughout)."""

from .nn import (
    MlpSpec,
    ParameterSet,
    attention_param_names,
    cross_entropy_soft,
    init_attention,
    init_mlp,
    mlp_forward,
    multi_head_attention,
)
from .optim import AdamState, adam_step, ema_blend
from .tensor import (
    AutodiffError,
    Tensor,
    backward,
    concat,
    exp,
    gather_rows,
    grad_enabled,
    log,
    matmul,
    no_grad,
    relu,
    reshape,
    safe_log,
    softmax,
    square,
    take_per_row,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "AdamState",
    "AutodiffError",
    "MlpSpec",
    "ParameterSet",
    "Tensor",
    "adam_step",
    "attention_param_names",
    "backward",
    "concat",
    "cross_entropy_soft",
    "ema_blend",
    "exp",
    "gather_rows",
    "grad_enabled",
    "init_attention",
    "init_mlp",
    "log",
    "matmul",
    "mlp_forward",
    "multi_head_attention",
    "no_grad",
    "relu",
    "reshape",
    "safe_log",
    "softmax",
    "square",
    "take_per_row",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
]
