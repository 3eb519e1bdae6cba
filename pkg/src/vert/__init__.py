"""Verifiability tuning: turn a black-box image classifier into one whose
sparse masked explanations can be checked by feature removal."""

__version__ = "0.1.0"

from .errors import ConfigError, NumericalError, ShapeError, UnsupportedOpError, UsageError, VertError
from .tuning import VertConfig, VertResult, attribute, verifiability_tune

__all__ = ["VertConfig", "VertResult", "attribute", "verifiability_tune", "VertError", "ShapeError",
           "UsageError", "UnsupportedOpError", "NumericalError", "ConfigError"]
