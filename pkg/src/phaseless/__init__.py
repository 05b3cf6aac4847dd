"""Phaseless inverse scattering with auxiliary point sources.

Phaseless interference intensities are reduced to X-ray line integrals of a
potential or to travel times of a refractive index, which are then inverted
on a voxel grid.
"""

from .geometry import BallGeometry, coverage_check, ell_star, make_triad
from .grid import VoxelField, load_grid, save_grid
from .phantom import Bump, BumpSum, line_integral_oracle, single_bump

__all__ = [
    "BallGeometry",
    "Bump",
    "BumpSum",
    "VoxelField",
    "coverage_check",
    "ell_star",
    "line_integral_oracle",
    "load_grid",
    "make_triad",
    "save_grid",
    "single_bump",
]

__version__ = "0.1.0"
