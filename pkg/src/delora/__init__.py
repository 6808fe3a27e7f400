"""Bounded low-rank adapters (DeLoRA) and their LoRA/DoRA/ETHER ablation ladder."""

from .adapters import (
    ALL_VARIANTS,
    Adapter,
    AdapterError,
    PretrainedLayer,
    Variant,
    delta_weight,
    effective_boundary,
    forward,
    init_adapter,
    merge,
    merged_weight,
    raw_update,
    xi_scaled_product,
)
from .grads import backward, fd_gradient, grad_check
from .numkit import column_norms, frobenius_norm, kaiming_uniform, make_rng, numerical_rank, svd_values
from .trainkit import OptimState, TraceRecord, lr_sweep, make_task, mse_loss, optim_step, train

__version__ = "0.1.0"

__all__ = [
    "ALL_VARIANTS",
    "Adapter",
    "AdapterError",
    "OptimState",
    "PretrainedLayer",
    "TraceRecord",
    "Variant",
    "backward",
    "column_norms",
    "delta_weight",
    "effective_boundary",
    "fd_gradient",
    "forward",
    "frobenius_norm",
    "grad_check",
    "init_adapter",
    "kaiming_uniform",
    "lr_sweep",
    "make_rng",
    "make_task",
    "merge",
    "merged_weight",
    "mse_loss",
    "numerical_rank",
    "optim_step",
    "raw_update",
    "svd_values",
    "train",
    "xi_scaled_product",
]
