"""Exception types raised by deqflow."""


class DeqflowError(Exception):
    """Base class for all deqflow errors."""


class InvalidInputError(DeqflowError, ValueError):
    """Input arrays are malformed (non-finite, wrong shape, out of range)."""


class UnsupportedConfigurationError(DeqflowError, ValueError):
    """The requested combination of options is not covered by the theory."""


class PreconditionError(DeqflowError, ValueError):
    """A mathematical precondition of an operation does not hold."""


class NonConvergenceError(DeqflowError, RuntimeError):
    """Fixed-point iteration hit its iteration cap before the tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceError(DeqflowError, RuntimeError):
    """A training flow produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
