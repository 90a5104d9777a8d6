"""Numerical checks for Neumann Laplacians on model manifolds with boundary."""

from .discretize import NeumannOperator, assemble_neumann, build_grid
from .exceptions import (ConfigError, DataError, DomainError, NeumannLBError, PreconditionError,
                         ResolutionError)
from .geometry import REGISTRY, Metric1D, WarpedSurface2D, geodesic_distance, get_manifold, is_complete

__all__ = [
    "REGISTRY", "ConfigError", "DataError", "DomainError", "Metric1D", "NeumannLBError",
    "NeumannOperator", "PreconditionError", "ResolutionError", "WarpedSurface2D",
    "assemble_neumann", "build_grid", "geodesic_distance", "get_manifold", "is_complete",
]

__version__ = "0.1.0"
