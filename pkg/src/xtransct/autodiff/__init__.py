"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module, parameter
from .tensor import GradientTape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Conv2d",
    "GradientTape",
    "LayerNorm",
    "Linear",
    "Module",
    "Tensor",
    "backward",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "parameter",
]
