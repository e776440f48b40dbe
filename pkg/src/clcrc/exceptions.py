"""Exception types shared across the toolkit."""


class DataError(ValueError):
    """Raised when input data fails validation (bad CSV rows, schema, units)."""


class InfeasibleModelError(RuntimeError):
    """Raised when an optimization model has no feasible solution.

    Carries a human-readable diagnostic in ``args[0]`` and, when available,
    structured hints in ``details``.
    """

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


class SolverError(RuntimeError):
    """Raised when a solver backend is unavailable or fails unexpectedly."""
