"""Exception types shared across the library."""


class WhodetError(Exception):
    """Base class for all library errors."""


class ValidationError(WhodetError, ValueError):
    """An input violates a documented precondition or invariant."""


class FormatError(WhodetError, ValueError):
    """A file does not conform to its on-disk format.

    The message names the offending field (magic, header, payload, ...).
    """


class PipelineMismatchError(WhodetError, ValueError):
    """Features handed to a detector were not produced by the model's pipeline."""


class CovarianceMemoryError(WhodetError, MemoryError):
    """Reconstructing the covariance would exceed the configured memory cap."""


class CholeskyError(WhodetError, ArithmeticError):
    """Cholesky factorization failed even after regularizer escalation."""
