"""Guided visual question generation on CPU.

A transformer encoder-decoder that fuses a learned image feature with
encoded answer/category context, generates questions token by token, and
scores them with standard n-gram overlap metrics. Everything runs on
float64 numpy through the package's own autodiff engine.
"""

from .errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    ParseError,
    ShapeError,
    VqgError,
)
from .tensor import Adam, Tensor, grad_check

__all__ = [
    "Adam",
    "ConfigError",
    "DataError",
    "NonFiniteError",
    "ParseError",
    "ShapeError",
    "Tensor",
    "VqgError",
    "grad_check",
]

__version__ = "0.1.0"
