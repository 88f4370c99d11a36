"""Exception hierarchy shared across the package."""


class TaskRelError(Exception):
    """Base class for all package errors."""


class InputError(TaskRelError, ValueError):
    """Malformed input data, file, or configuration."""


class DivergenceError(TaskRelError, ArithmeticError):
    """An optimization produced a non-finite value."""


class InfeasibleError(TaskRelError):
    """A transport problem or prior-matching constraint has no solution."""
