"""Simulation toolkit for log-correlated Gaussian fields, their chaos measures,
Liouville Brownian motion and the radial (spherical-average) process."""
from .errors import ConditioningError, ConvergenceError, DomainError, LgfLabError, PathExitError, ResourceError
from .params import Params
from .stochastic import RngSeed

__version__ = "0.1.0"

__all__ = [
    "Params",
    "RngSeed",
    "LgfLabError",
    "DomainError",
    "ConditioningError",
    "ConvergenceError",
    "PathExitError",
    "ResourceError",
]
