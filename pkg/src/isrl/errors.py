"""Exception types shared across the package."""


class IsrlError(Exception):
    """Base class for package errors."""


class DimensionError(IsrlError, ValueError):
    """Grid shapes do not match or are too small for an operator."""


class NumericError(IsrlError, FloatingPointError):
    """A non-finite value appeared in a computation."""


class InstabilityError(NumericError):
    """Time integration blew up (velocity growth beyond the guard)."""


class StructuralError(IsrlError, RuntimeError):
    """The differentiation graph does not have the required structure."""


class ConfigError(IsrlError, ValueError):
    """Invalid configuration or dataset specification."""
