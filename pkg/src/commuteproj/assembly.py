"""Dense patch systems: assemble local masses and constraint blocks over a patch numbering."""

from __future__ import annotations

import numpy as np

from .cls import DEFAULT_TOL_FEAS, FeasibilityError, InfeasibleConstraints, KktSolver
from .dofmap import DofMap


class PatchSystem:
    """Constrained minimisation over a patch space.

    ``masses[e]`` is the local mass of element e, ``blocks[e]`` the local
    constraint rows of element e (acting on its local coefficients).
    """

    def __init__(self, dofmap: DofMap, masses, blocks=None, label: str = ""):
        self.dofmap = dofmap
        self.label = label
        n = dofmap.n_dofs
        M = np.zeros((n, n))
        rows = []
        for e, Me in enumerate(masses):
            idx = dofmap.cell_dofs[e]
            keep = idx >= 0
            M[np.ix_(idx[keep], idx[keep])] += Me[np.ix_(keep, keep)]
        self.row_counts = []
        if blocks is not None:
            for e, Be in enumerate(blocks):
                idx = dofmap.cell_dofs[e]
                keep = idx >= 0
                R = np.zeros((Be.shape[0], n))
                R[:, idx[keep]] = Be[:, keep]
                rows.append(R)
                self.row_counts.append(Be.shape[0])
        B = np.vstack(rows) if rows else np.zeros((0, n))
        self.solver = KktSolver(M, B)

    @property
    def mass(self):
        return self.solver.M

    def solve(self, local_loads, local_rhs=None, tol_feas: float = DEFAULT_TOL_FEAS,
              scale: float = 0.0, check: bool = True):
        """Return (per-element coefficients, relative constraint residual)."""
        b = self.dofmap.assemble_vector(np.asarray(local_loads))
        d = None
        if local_rhs is not None:
            d = np.concatenate([np.atleast_1d(r) for r in local_rhs])
        x, rel = self.solver.solve(b, d, tol_feas=tol_feas, scale=scale, label=self.label, check=check)
        return self.dofmap.gather(x), rel, x


def solve_patch(system: PatchSystem, vertex: int, condition: str, loads, rhs, tol_feas, scale, check=True):
    """``system.solve`` with infeasibility reported against the patch vertex."""
    try:
        return system.solve(loads, rhs, tol_feas, scale=scale, check=check)
    except FeasibilityError:
        raise
    except InfeasibleConstraints as exc:
        raise FeasibilityError(f"patch {vertex}: {condition} inconsistent (relative residual "
                               f"{exc.residual:.3e} > {tol_feas:.1e})", vertex, condition, exc.residual) from exc
