"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation errors exit 2,
feasibility errors exit 3, numerical errors exit 4.
"""


class FedsepError(Exception):
    """Base class for all package errors."""


class ValidationError(FedsepError, ValueError):
    """Invalid inputs, configs, or domain violations (e.g. a periodic chain
    where an aperiodic one is required)."""


class FeasibilityError(FedsepError, RuntimeError):
    """The request is well-formed but exceeds a declared resource cap
    (state-space size, dense-matrix work budget)."""


class NumericalError(FedsepError, RuntimeError):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual
