"""Selective state-space mixture-of-experts classifier for multichannel
sEMG-style gesture recordings, with a self-contained f64 autodiff engine."""

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    EmgMoeError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .tensor import Tape, Tensor, active_tape, backward, no_grad

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "no_grad",
    "EmgMoeError",
    "ConfigError",
    "ShapeError",
    "DataError",
    "FormatError",
    "NumericalError",
    "DomainError",
]

__version__ = "0.1.0"
