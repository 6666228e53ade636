"""Boundary blow-up solutions of −Δ_H u + H(∇u)^q + λu = f on planar domains."""

from .geometry import DomainSpec, build_grid, distance_fast_march
from .norms import NormSpec
from .pde import ProblemSpec, SourceSpec, solve_blowup, solve_truncated

__version__ = "0.1.0"

__all__ = [
    "DomainSpec",
    "NormSpec",
    "ProblemSpec",
    "SourceSpec",
    "build_grid",
    "distance_fast_march",
    "solve_blowup",
    "solve_truncated",
]
