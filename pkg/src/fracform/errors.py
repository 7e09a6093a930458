"""Exception types shared across the package."""


class FracformError(Exception):
    """Base class for every error raised by this package."""


class ParseError(FracformError):
    """A structure document, value list, or polynomial could not be parsed."""


class ValidationError(FracformError):
    """Input data violates a structural or numerical invariant."""


class NotHarmonicError(ValidationError):
    """The Laplacian/weight pair fails the renormalization fixed-point test."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class CapExceededError(ValidationError):
    """A requested depth would materialize more cells than the configured cap."""


class NumericalError(FracformError):
    """A solver or decomposition failed in a way valid inputs never trigger."""
