"""Numerical laboratory for p-capacitary potentials and the geometric
inequalities they control: capacities by energy and flux routes, level-set
flux profiles and their monotonicity checks, outward minimising hulls by
total-variation obstacle minimisation, and Minkowski-type inequality reports
on implicit test domains."""

__version__ = "0.1.0"

from .geometry import (
    ImplicitDomain,
    SurfaceMesh,
    ball_volume,
    boundary_integral,
    extract_boundary_mesh,
    gauss_bonnet_check,
    make_shape,
    sphere_area,
)
from .curvature import mesh_curvatures
from .radial import RadialSolution, radial_potential

__all__ = [
    "ImplicitDomain",
    "SurfaceMesh",
    "ball_volume",
    "boundary_integral",
    "extract_boundary_mesh",
    "gauss_bonnet_check",
    "make_shape",
    "mesh_curvatures",
    "sphere_area",
    "RadialSolution",
    "radial_potential",
]
