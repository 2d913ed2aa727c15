"""Exception types shared across the package."""


class DriftlabError(Exception):
    """Base class for all package errors."""


class DimensionError(DriftlabError, ValueError):
    """Array shapes do not agree."""


class ParameterError(DriftlabError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class StateError(DriftlabError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class DataError(DriftlabError, ValueError):
    """Input data cannot support the requested computation."""


class FormatError(DriftlabError, ValueError):
    """A file does not follow the expected on-disk format."""


class NumericError(DriftlabError, ArithmeticError):
    """A quantity is numerically undefined (zero norm, non-finite values)."""


class ConfigError(DriftlabError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(DriftlabError, AssertionError):
    """A runtime invariant of an experiment was broken."""
