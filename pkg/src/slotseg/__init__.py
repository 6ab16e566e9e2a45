"""Slot-based video panoptic segmentation at desk scale."""

from . import ops
from .errors import ConfigError, NumericsError, ShapeError
from .tensor import (
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    set_finite_checks,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NumericsError",
    "ShapeError",
    "Tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "ops",
    "set_default_dtype",
    "set_finite_checks",
    "__version__",
]
