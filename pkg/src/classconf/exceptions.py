"""Exception types raised across the package."""


class ClassconfError(Exception):
    """Base class for all package errors."""


class DimensionError(ClassconfError, ValueError):
    """Array shapes do not line up."""


class DomainError(ClassconfError, ValueError):
    """An argument lies outside its mathematical domain."""


class PreconditionError(ClassconfError, ValueError):
    """An operation was called on inputs it does not accept (empty batch, ...)."""


class CalibrationSizeError(ClassconfError, ValueError):
    """Too few calibration scores for the requested mis-coverage level."""


class ConfigError(ClassconfError, ValueError):
    """Invalid or incomplete configuration."""


class ParseError(ClassconfError, ValueError):
    """Malformed input file."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SchemaError(ClassconfError, KeyError):
    """A required column is missing from a tabular input."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(ClassconfError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``state`` holds a snapshot (epoch, batch, parameters, multipliers) taken
    at the moment of failure so the caller can dump it.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
