"""Exception types raised across the package."""


class SubspaceError(Exception):
    """Base class for all package errors."""


class ConfigError(SubspaceError, ValueError):
    """Mismatched shapes, segment tables, or invalid configuration values."""


class InputError(SubspaceError, ValueError):
    """Arguments outside the domain of an operation."""


class StateError(SubspaceError, RuntimeError):
    """Operation called on an object that is not ready for it."""


class NumericError(SubspaceError, FloatingPointError):
    """Non-finite or degenerate numeric values."""


class FormatError(SubspaceError, ValueError):
    """Malformed file contents."""
