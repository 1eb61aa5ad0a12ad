"""Volumetric brain-tissue segmentation with a 3D-DenseUNet attention model
and two-independent-teacher weight fusion, built on a self-contained numpy
reverse-mode autodiff engine."""

from .nn import ModelConfig, NamedWeights, build_model, forward, predict
from .tensor import Tape, Tensor, no_grad

__all__ = [
    "ModelConfig",
    "NamedWeights",
    "Tape",
    "Tensor",
    "build_model",
    "forward",
    "no_grad",
    "predict",
]

__version__ = "0.1.0"
