"""Dense-tensor math, reverse-mode autodiff and preconditioned heads."""

from .checkpoint import load_checkpoint, save_checkpoint
from .heads import (
    DenoiserModel,
    EnergyModel,
    NumericalError,
    Preconditioner,
    divergence,
    grad_params,
    time_deriv_fd,
)
from .mlp import MLPBackbone, ParamVector
from .tape import Tensor, const, leaf

__all__ = [
    "Tensor",
    "leaf",
    "const",
    "MLPBackbone",
    "ParamVector",
    "Preconditioner",
    "DenoiserModel",
    "EnergyModel",
    "NumericalError",
    "grad_params",
    "divergence",
    "time_deriv_fd",
    "save_checkpoint",
    "load_checkpoint",
]
