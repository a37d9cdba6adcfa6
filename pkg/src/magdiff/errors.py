"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class MagdiffError(Exception):
    """Base class for library errors."""


class ValidationError(MagdiffError, ValueError):
    """Invalid input parameters or configuration."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class GridMismatchError(ValidationError):
    """Distributions living on different velocity grids were combined."""


class SolvabilityError(MagdiffError):
    """Right-hand side violates the compatibility condition of a singular solve."""

    def __init__(self, message: str, violation: float, tolerance: float):
        self.violation = violation
        self.tolerance = tolerance
        super().__init__(f"{message} (violation {violation:.3e} > tolerance {tolerance:.3e})")


class PreconditionError(ValidationError):
    """An operator was applied outside its domain (e.g. non-symmetric data)."""


class ConvergenceError(MagdiffError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, iterations: int, contraction: float, update: float):
        self.iterations = iterations
        self.contraction = contraction
        self.update = update
        super().__init__(
            f"{message}: {iterations} iterations, last relative update {update:.3e}, "
            f"estimated contraction {contraction:.4f}"
        )


class StabilityError(MagdiffError):
    """Time step exceeds the stability bound of an explicit substep."""

    def __init__(self, message: str, dt: float, dt_max: float):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(f"{message} (dt={dt:.3e} > dt_max={dt_max:.3e})")
