"""Convolution-free referring image segmentation, trained from scratch on
synthetic shape scenes with a self-contained autodiff engine."""

from .tensor import Tensor, backward, no_grad
from .encoders import ModelConfig
from .fusion import FusionVariant
from .decoder import PredictionPair, RestrParams, forward, init_model

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ModelConfig",
    "FusionVariant",
    "PredictionPair",
    "RestrParams",
    "forward",
    "init_model",
]

__version__ = "0.1.0"
