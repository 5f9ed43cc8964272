"""Minimal tensor library with reverse-mode automatic differentiation."""
from . import ops
from .core import Tape, Tensor, active_tape, backward, default_dtype, set_default_dtype
from .gradcheck import GradCheckReport, grad_check
from .kernels import BACKEND as KERNEL_BACKEND
from .nn import Module, truncated_normal
from .optim import Adam

__all__ = [
    "Adam",
    "GradCheckReport",
    "KERNEL_BACKEND",
    "Module",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "default_dtype",
    "grad_check",
    "ops",
    "set_default_dtype",
    "truncated_normal",
]
