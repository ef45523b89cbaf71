"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3.
"""
from __future__ import annotations


class KimuraError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(KimuraError, ValueError):
    """An argument violates a documented precondition."""


class UnsupportedDimensionError(InvalidInputError):
    """A grid-based routine was asked for a dimension other than 2 or 3."""


class NumericalFailure(KimuraError, ArithmeticError):
    """A numerical method could not deliver a result."""


class BoundaryGuardError(NumericalFailure):
    """A state reached the simplex boundary where a ratio is undefined."""


class CFLViolation(NumericalFailure):
    """The explicit drift step is too large for the grid spacing."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class PicardNonConvergence(NumericalFailure):
    """Per-step Picard iteration did not meet its tolerance."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = list(history)
