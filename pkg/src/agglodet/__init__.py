"""Desk-scale single-stage detector with an agglomerated feature hierarchy."""

from .tensor import Tensor, Parameter
from .errors import ConfigurationError

__all__ = ["Tensor", "Parameter", "ConfigurationError"]
__version__ = "0.1.0"
