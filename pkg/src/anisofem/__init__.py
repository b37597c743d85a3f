"""Anisotropic graded finite elements for corner-edge singularities on the Fichera domain."""
from .convergence import RunConfig, run_convergence, stability_slopes
from .exponents import vertex_exponent
from .fem import solve_poisson
from .interpolation import apply_Dh, select_sigma
from .mesh import (Macroelement, MacroKind, Mesh, build_fichera_macros, build_mesh, check_grading,
                   classify_nodes, mesh_quality)
from .ocp import OCPConfig, ocp_convergence, solve_ocp

__version__ = "0.1.0"

__all__ = ["Macroelement", "MacroKind", "Mesh", "build_fichera_macros", "build_mesh", "check_grading",
           "classify_nodes", "mesh_quality", "solve_poisson", "apply_Dh", "select_sigma", "RunConfig",
           "run_convergence", "stability_slopes", "vertex_exponent", "OCPConfig", "ocp_convergence",
           "solve_ocp"]
