"""Exception hierarchy shared across the package."""


class FDIRError(Exception):
    """Base class for every error raised by pfo_fdir."""


class ConfigurationError(FDIRError, ValueError):
    """Inconsistent model dimensions, missing components or invalid config."""


class ArgumentError(FDIRError, ValueError):
    """A call argument violates a documented precondition."""


class NumericError(FDIRError, ArithmeticError):
    """Non-finite values or a numerically invalid intermediate.

    Args:
        term: name of the offending term, if known
        index: step or particle index, if known
    """

    def __init__(self, message, term=None, index=None):
        super().__init__(message)
        self.term = term
        self.index = index


class ConvergenceError(NumericError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, violation=None, **kwargs):
        super().__init__(message, **kwargs)
        self.violation = violation


class CheckpointError(FDIRError, FileNotFoundError):
    """A required checkpoint is missing or unreadable."""
