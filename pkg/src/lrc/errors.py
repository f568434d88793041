"""Exception types shared across the package."""


class LRCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LRCError, ValueError):
    """Rejected input: wrong shape, out-of-range value, bad config."""


class NumericalError(LRCError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(NumericalError):
    """Training loss blew up; ``step`` is where it happened."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class InsufficientDataError(LRCError, ValueError):
    """Not enough samples or trace records for the requested estimate."""
