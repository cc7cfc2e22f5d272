class ETKError(Exception):
    """Base class for package errors."""


class InvalidParameterError(ETKError, ValueError):
    pass


class NumericalError(ETKError, ArithmeticError):
    """Non-finite values or failed factorizations during a computation."""


class ScheduleMismatchError(ETKError):
    """An artifact was produced under a different noise schedule."""


class FormatError(ETKError):
    """Malformed ETK1 container or prior file."""
