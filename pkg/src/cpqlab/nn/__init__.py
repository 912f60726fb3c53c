"""Minimal float64 neural toolkit: autodiff, MLPs, Adam, target updates."""

from . import autodiff
from .autodiff import NumericError, Var
from .mlp import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    DimensionError,
    MlpParams,
    compute_gradients,
    forward_graph,
    init_mlp,
    leaves,
    mlp_forward,
    split_heads,
    tanh_gaussian_sample,
    zeros_like,
)
from .mlp import grads_to_params
from .optim import AdamState, adam_init, adam_step, soft_update

__all__ = [
    "autodiff",
    "NumericError",
    "Var",
    "LOG_STD_MAX",
    "LOG_STD_MIN",
    "DimensionError",
    "MlpParams",
    "compute_gradients",
    "forward_graph",
    "init_mlp",
    "leaves",
    "mlp_forward",
    "split_heads",
    "grads_to_params",
    "tanh_gaussian_sample",
    "zeros_like",
    "AdamState",
    "adam_init",
    "adam_step",
    "soft_update",
]
