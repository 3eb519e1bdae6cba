"""Exception types shared across the package."""


class VertError(Exception):
    """Base class for package errors."""


class ShapeError(VertError, ValueError):
    """Input dimensions do not match what an operation expects."""


class UsageError(VertError):
    """An API was called in a state where the call makes no sense."""


class UnsupportedOpError(VertError):
    """An operation cannot take part in nested (second-order) differentiation."""


class NumericalError(VertError, FloatingPointError):
    """A loss or gradient became non-finite."""


class ConfigError(VertError, ValueError):
    """A configuration value is invalid."""
