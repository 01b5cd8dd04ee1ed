class CoastError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(CoastError, ValueError):
    """Input data or configuration violates a documented precondition."""


class ConvergenceError(CoastError, RuntimeError):
    """An iterative solver exhausted its iteration budget."""
