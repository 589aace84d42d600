"""Non-local multi-continuum upscaling of 2D fractured porous media.

Pipeline: build a fine Q1 discrete-fracture model (:mod:`nlmc.fem_fine`),
identify coarse continua (:mod:`nlmc.geometry`), compute constrained
energy-minimizing basis functions on oversampled regions (:mod:`nlmc.basis`),
and assemble the non-local coarse system (:mod:`nlmc.upscale`).
"""
from .basis import (
    build_auxiliary_spaces,
    build_cem_bases,
    build_simplified_bases,
    cem_simplified_cosines,
)
from .fem_fine import assemble_mass, assemble_stiffness, averaging_matrix, solve_fine_steady
from .geometry import (
    GLOBAL,
    FractureNetwork,
    build_coarse_grid,
    build_fine_mesh,
    enumerate_continua,
    snap_fracture,
)
from .upscale import CoarseSystem, error_report

__all__ = [
    "GLOBAL", "FractureNetwork", "CoarseSystem",
    "build_fine_mesh", "build_coarse_grid", "snap_fracture", "enumerate_continua",
    "assemble_stiffness", "assemble_mass", "averaging_matrix", "solve_fine_steady",
    "build_simplified_bases", "build_auxiliary_spaces", "build_cem_bases", "cem_simplified_cosines",
    "error_report",
]
