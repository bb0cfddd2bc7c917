"""Exception types raised across the package."""


class VolcalError(Exception):
    """Base class for all package errors."""


class ValidationError(VolcalError, ValueError):
    """Input data violates a documented invariant."""


class QuoteFormatError(ValidationError):
    """A quote file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(VolcalError, ValueError):
    """Argument outside the domain where the quantity is defined."""


class SingularSystemError(VolcalError, ArithmeticError):
    """Tridiagonal elimination hit a zero pivot."""


class NumericalError(VolcalError, ArithmeticError):
    """Non-finite values or a failed factorization during computation."""
