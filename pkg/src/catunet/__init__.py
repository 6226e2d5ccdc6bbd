"""Concatenation-augmented U-Net autoencoder for positives-only training and
reconstruction-error diagnosis, with a small self-contained autodiff core."""

__version__ = "0.1.0"

from .rng import Rng
from .tensor import Tensor

__all__ = ["Rng", "Tensor", "__version__"]
