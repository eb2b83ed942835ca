"""Reverse-mode autodiff engine: Tensor, ops, layers, losses, optimizers."""

from .tensor import Tensor, as_tensor, parameter, no_grad, is_grad_enabled
from . import ops
from . import losses
from . import nn
from . import optim

__all__ = ["Tensor", "as_tensor", "parameter", "no_grad", "is_grad_enabled",
           "ops", "losses", "nn", "optim"]
