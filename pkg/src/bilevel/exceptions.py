"""Exception hierarchy shared by every module of the package."""


class BilevelError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(BilevelError, ValueError):
    """Invalid or incomplete configuration (missing slot, unknown group, bad split...)."""


class ShapeError(BilevelError, ValueError):
    """Array shapes do not match what an operation expects."""


class PreconditionError(BilevelError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(BilevelError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``node`` is the tape node index where it was first observed, when known.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DivergenceError(NumericError):
    """Inner dynamics blew up; ``step`` is the offending iteration."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class StaleTraceError(BilevelError, ValueError):
    """A trace is used with hyperparameters or a schedule it was not recorded with."""
