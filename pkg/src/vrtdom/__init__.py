"""Discrete-ordinate solver for polarized radiative transfer in plane-parallel layers."""

from .core import (
    BlackBase,
    Direction,
    LambertianBase,
    LayerSpec,
    MaterialSpec,
    MuellerTableBase,
    NumericalError,
    Quadrature,
    Source,
    StokesVector,
    ValidationError,
    build_double_gauss_quadrature,
    isotropic_coeffs,
    load_material,
    rayleigh_coeffs,
    validate_material,
)
from .solver import VrteSolver, solve_vrte

__all__ = [
    "BlackBase",
    "Direction",
    "LambertianBase",
    "LayerSpec",
    "MaterialSpec",
    "MuellerTableBase",
    "NumericalError",
    "Quadrature",
    "Source",
    "StokesVector",
    "ValidationError",
    "VrteSolver",
    "build_double_gauss_quadrature",
    "isotropic_coeffs",
    "load_material",
    "rayleigh_coeffs",
    "solve_vrte",
    "validate_material",
]
