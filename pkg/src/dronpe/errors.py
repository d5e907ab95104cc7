"""Exception types shared across the package."""


class DronpeError(Exception):
    """Base class for all package errors."""


class DimError(DronpeError, ValueError):
    """Array dimensions do not match the model or task."""


class NonFiniteEvaluation(DronpeError, FloatingPointError):
    """A NaN or infinity appeared during a differentiable evaluation.

    ``index`` is the creation index of the first offending graph operation
    (or the offending data row, when raised by a loss over a batch).
    """

    def __init__(self, message, index=None, op=None):
        super().__init__(message)
        self.index = index
        self.op = op


class InvalidActNorm(DronpeError, ValueError):
    """An ActNorm scale entry is exactly zero, so the block is not invertible."""


class DomainError(DronpeError, ValueError):
    """Argument outside the admissible domain."""


class SimWarning(UserWarning):
    """Simulator state had to be clamped (non-finite or negative population)."""
