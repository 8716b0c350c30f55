"""Exception hierarchy shared across the package."""


class HbcmfError(Exception):
    """Base class for all package errors."""


class SchemaError(HbcmfError, ValueError):
    """Malformed schema, data file, or run configuration."""


class DomainError(HbcmfError, ValueError):
    """A value lies outside the support of its exponential family."""


class NumericalError(HbcmfError, ArithmeticError):
    """Overflow, non-finite values, or a factorization that cannot be repaired."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class TrainingError(NumericalError):
    """Training produced a non-finite objective or state."""


class RequestError(HbcmfError, ValueError):
    """A prediction request cannot be served."""


class StateError(HbcmfError, RuntimeError):
    """A model or chain is not in a usable state."""
