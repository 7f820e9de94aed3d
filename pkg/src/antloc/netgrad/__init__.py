"""Reverse-mode autodiff, the localizer network, Adam, and training."""

from .net import LocalizerNet, localizer_layers
from .optim import AdamState, NonFiniteGradient, adam_step
from .tensor import Tensor, no_grad

__all__ = ["LocalizerNet", "localizer_layers", "AdamState", "NonFiniteGradient", "adam_step", "Tensor", "no_grad"]
