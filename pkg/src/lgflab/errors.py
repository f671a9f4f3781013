"""Exception types shared across the package."""


class LgfLabError(Exception):
    """Base class for all package errors."""


class DomainError(LgfLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConditioningError(LgfLabError, ArithmeticError):
    """A linear-algebra step is numerically unsafe."""


class ResourceError(LgfLabError, RuntimeError):
    """A requested computation exceeds its declared cost budget."""


class PathExitError(LgfLabError, RuntimeError):
    """A sampled trajectory left the simulation box.

    ``last_valid`` is the index of the last grid time still inside the box.
    """

    def __init__(self, message: str, last_valid: int):
        super().__init__(message)
        self.last_valid = last_valid


class ConvergenceError(LgfLabError, RuntimeError):
    """An iterative search did not terminate within its budget."""
