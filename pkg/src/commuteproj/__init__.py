"""Stable local commuting projectors onto Nedelec (H(curl)) and Raviart-Thomas (H(div))
finite element spaces on tetrahedral meshes, with global best-approximation solvers
and an experiment harness."""

from .cls import InfeasibleConstraints, KktSolver
from .fields import AnalyticField, BrokenField, make_field
from .globalbest import (equivalence_report, global_constrained_best, global_unconstrained_best,
                         localbest_sum, mixed_pi_div, three_field_mixed)
from .hcurl_proj import FeasibilityError, HcurlProjector, commute_residual
from .hdiv_proj import HdivProjector
from .mesh import TetMesh, load_mesh, uniform_refine

__version__ = "0.1.0"

__all__ = [
    "AnalyticField", "BrokenField", "FeasibilityError", "HcurlProjector", "HdivProjector",
    "InfeasibleConstraints", "KktSolver", "TetMesh", "commute_residual", "equivalence_report",
    "global_constrained_best", "global_unconstrained_best", "load_mesh", "localbest_sum",
    "make_field", "mixed_pi_div", "three_field_mixed", "uniform_refine",
]
