"""Exception hierarchy shared by every rglm module.

The CLI maps these onto process exit codes (see ``rglm.cli``).
"""

from __future__ import annotations


class RglmError(Exception):
    """Base class for all rglm errors."""

    exit_code = 1


class ParameterError(RglmError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class ConfigurationError(RglmError):
    """A configuration file, key or combination of settings is invalid."""

    exit_code = 2


class ParseError(RglmError):
    """A serialized artifact could not be read.

    ``record`` names the offending record (e.g. ``"edge 3"``).
    """

    exit_code = 2

    def __init__(self, message: str, record: str | None = None):
        self.record = record
        if record is not None:
            message = f"{message} (record: {record})"
        super().__init__(message)


class DimensionError(RglmError, ValueError):
    """Array shapes are incompatible."""


class UsageError(RglmError):
    """An API was called in a way its contract forbids."""


class LengthError(UsageError):
    """An input sequence exceeds the model's maximum length."""


class PreconditionError(UsageError):
    """A structural precondition of the input does not hold."""


class NumericError(RglmError, ArithmeticError):
    """A computation produced or received non-finite values."""

    exit_code = 3


class EstimationError(NumericError):
    """A statistical estimator cannot be applied to the given samples."""


class AcceptanceError(RglmError):
    """A directional acceptance check failed."""

    exit_code = 4
