"""Semigroup calculus, BMO, paraproducts and T(1) measurements on weighted graphs."""

__version__ = "0.1.0"

from .space import Ball, Space, build_space, cycle, grid2d, measure_doubling, path  # noqa: E402,F401
from .spectral import (  # noqa: E402,F401
    Generator,
    ScaleGrid,
    SpectralFunction,
    apply_function,
    assemble_generator,
    make_grid,
    semigroup,
    semigroup_derivative,
)
