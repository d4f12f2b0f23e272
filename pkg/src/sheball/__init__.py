"""Simulation and rare-event estimation for the stochastic heat equation on the
torus and its Gaussian companions (free-space field, fBm of index 1/4, the
auxiliary process T)."""

__version__ = "0.1.0"

from .errors import DegeneracyError, DomainError, NotPSDError, SchemaError, SolverError
from .rng import RngStream

__all__ = ["__version__", "RngStream", "DomainError", "NotPSDError", "DegeneracyError",
           "SchemaError", "SolverError"]
