"""Exception types shared across the package."""


class MaskcapError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MaskcapError, ValueError):
    """Tensor or vector dimensions do not line up."""


class DomainError(MaskcapError, ValueError):
    """Input is outside the mathematical domain of an operation."""


class NumericError(MaskcapError, ArithmeticError):
    """A non-finite value (NaN/Inf) was produced or detected."""


class ParseError(MaskcapError, ValueError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(MaskcapError, ValueError):
    """A dataset record violates the documented schema."""


class TrainingError(MaskcapError, RuntimeError):
    """Training cannot proceed (non-finite gradients, config mismatch)."""


class MissingTagError(MaskcapError, KeyError):
    """External-tags noun extraction has no entry for a caption."""
