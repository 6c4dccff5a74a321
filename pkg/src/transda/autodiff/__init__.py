"""A small reverse-mode autodiff engine over numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .optim import OptimizerState, Schedule, adam_step, adamw_step, lr_at
from .params import NETWORK_KINDS, ParameterStore, check_aligned
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    precision,
    stop_gradient,
)

__all__ = [
    "ops", "grad_check", "OptimizerState", "Schedule", "adam_step", "adamw_step",
    "lr_at", "NETWORK_KINDS", "ParameterStore", "check_aligned", "AutodiffError",
    "NonFiniteError", "ShapeError", "Tensor", "as_tensor", "backward",
    "default_dtype", "precision", "stop_gradient",
]
