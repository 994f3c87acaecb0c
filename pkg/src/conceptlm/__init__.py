"""Byte-level language model with next-concept prediction over a
product-quantized concept vocabulary, plus baselines and diagnostics."""

__version__ = "0.1.0"

from .autodiff import DiffArray, finite_difference_check, no_grad, stop_gradient
from .config import ModelConfig, TrainConfig

__all__ = [
    "DiffArray",
    "ModelConfig",
    "TrainConfig",
    "finite_difference_check",
    "no_grad",
    "stop_gradient",
]
