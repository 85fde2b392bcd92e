"""Littlewood-Paley analysis and pseudo-spectral solvers for compressible shallow water on the torus."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BlockRangeError,
    CFLError,
    GridMismatchError,
    UndefinedAtZeroError,
    ValidationError,
    VacuumError,
)
from .spectral import Grid, SpectralField, make_grid  # noqa: E402
from .besov import BesovSpec, TrajectorySeries, besov_norm, build_partition, hybrid_norm  # noqa: E402
from .linear import AcousticState, LinearParams, LyapunovConfig, evolve_linear  # noqa: E402
from .nonlinear import FriedrichsLevel, PhysicalLaws, evolve_sw  # noqa: E402

__all__ = [
    "AcousticState",
    "BesovSpec",
    "BlockRangeError",
    "CFLError",
    "FriedrichsLevel",
    "Grid",
    "GridMismatchError",
    "LinearParams",
    "LyapunovConfig",
    "PhysicalLaws",
    "SpectralField",
    "TrajectorySeries",
    "UndefinedAtZeroError",
    "ValidationError",
    "VacuumError",
    "besov_norm",
    "build_partition",
    "evolve_linear",
    "evolve_sw",
    "hybrid_norm",
    "make_grid",
]
