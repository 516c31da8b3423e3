"""Equality-constrained least squares (KKT) engine.

Minimise ``1/2 x^T M x - b^T x`` subject to ``B x = d`` with ``M`` symmetric
positive definite.  In the projector pipelines ``M`` is a mass matrix and
``b`` the load of the target, so the minimiser is the constrained L2 best
approximation.

The nullspace method is used: after scaling the rows of ``B`` to unit norm a
column-pivoted QR of ``B^T`` reveals the rank, a minimum-norm particular
solution handles the (possibly redundant) constraints and the remaining
problem is an SPD solve on the nullspace.  Redundant but consistent rows are
accepted; inconsistent ones raise :class:`InfeasibleConstraints`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

RANK_TOL = 1e-11
ZERO_ROW = 1e-12
DEFAULT_TOL_FEAS = 1e-9


class InfeasibleConstraints(RuntimeError):
    """Constraint residual of the least-squares solve exceeds the tolerance."""

    def __init__(self, message, residual=None, scale=None, rows=None):
        super().__init__(message)
        self.residual = residual
        self.scale = scale
        self.rows = rows


class FeasibilityError(InfeasibleConstraints):
    """A patch problem has an empty admissible set (beyond tolerance); names the patch vertex."""

    def __init__(self, message, vertex=None, condition=None, residual=None):
        super().__init__(message, residual=residual)
        self.vertex, self.condition = vertex, condition


class NotPositiveDefinite(RuntimeError):
    pass


@dataclass
class KktProblem:
    mass: np.ndarray
    load: np.ndarray
    constraints: np.ndarray | None = None
    rhs: np.ndarray | None = None
    tol_feas: float = DEFAULT_TOL_FEAS
    scale: float = 0.0  # absolute floor for the feasibility test
    label: str = ""

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)
        self.load = np.asarray(self.load, dtype=float)
        n = self.mass.shape[0]
        if self.constraints is None:
            self.constraints = np.zeros((0, n))
            self.rhs = np.zeros(0)
        self.constraints = np.asarray(self.constraints, dtype=float).reshape(-1, n)
        self.rhs = np.asarray(self.rhs, dtype=float)


@dataclass
class KktResult:
    x: np.ndarray
    multipliers: np.ndarray | None
    constraint_residual: float
    stationarity_residual: float
    rank: int
    nullspace_dim: int
    diagnostics: dict = field(default_factory=dict)


class KktSolver:
    """Factorisation of a fixed (M, B) pair reusable for many right-hand sides."""

    def __init__(self, mass, constraints=None, rank_tol: float = RANK_TOL):
        M = np.asarray(mass, dtype=float)
        n = M.shape[0]
        if constraints is None:
            B = np.zeros((0, n))
        else:
            B = np.asarray(constraints, dtype=float)
            B = B if B.ndim == 2 else B.reshape(-1, n)
        self.n, self.m = n, B.shape[0]
        self.M, self.B = M, B
        norms = np.linalg.norm(B, axis=1)
        top = norms.max() if len(norms) else 0.0
        # rows at round-off level carry no information; scaling them up would invent constraints
        live = norms > ZERO_ROW * top
        self.row_scale = np.where(live, 1.0 / np.where(live, norms, 1.0), 1.0 / top if top > 0 else 1.0)
        Bn = np.where(live[:, None], B * self.row_scale[:, None], 0.0)
        if self.m and n:
            Q, R, piv = sla.qr(Bn.T, mode="full", pivoting=True)
            diag = np.abs(np.diag(R))
            r = int(np.sum(diag > rank_tol * max(diag[0] if len(diag) else 0.0, 1.0)))
        else:
            Q, R, piv, r = np.eye(n), np.zeros((n, 0)), np.zeros(0, dtype=int), 0
        self.rank = r
        self.Bn = Bn
        self.Y = Q[:, :r]
        self.Z = Q[:, r:]
        self.R11 = R[:r, :r]
        self.piv = piv[:r]
        ZMZ = self.Z.T @ M @ self.Z
        ZMZ = 0.5 * (ZMZ + ZMZ.T)
        try:
            self.chol = sla.cho_factor(ZMZ, lower=True) if ZMZ.size else None
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("mass matrix is not positive definite on the constraint nullspace") from exc

    @property
    def nullspace_dim(self) -> int:
        return self.n - self.rank

    def particular(self, rhs):
        """Minimum-norm solution of the independent constraint rows, plus scaled residual."""
        rhs = np.asarray(rhs, dtype=float)
        dn = rhs * (self.row_scale if rhs.ndim == 1 else self.row_scale[:, None])
        if self.rank:
            y = sla.solve_triangular(self.R11, dn[self.piv], trans="T", lower=False)
            xp = self.Y @ y
        else:
            xp = np.zeros((self.n,) + dn.shape[1:])
        res = self.Bn @ xp - dn
        return xp, res, dn

    def solve(self, load, rhs=None, tol_feas: float = DEFAULT_TOL_FEAS, scale: float = 0.0,
              label: str = "", check: bool = True):
        """Solve for one (vector) or many (matrix columns) right-hand sides.

        Returns ``(x, residual)`` where residual is the max relative constraint
        residual (0 for unconstrained problems).
        """
        load = np.asarray(load, dtype=float)
        if rhs is None:
            rhs = np.zeros((self.m,) + load.shape[1:])
        xp, res, dn = self.particular(rhs)
        rel = 0.0
        if self.m:
            rnorm = np.linalg.norm(res, axis=0)
            dnorm = np.linalg.norm(dn, axis=0)
            denom = np.maximum(dnorm, scale)
            denom = np.where(denom > 0, denom, 1.0)
            relv = rnorm / denom
            rel = float(np.max(relv))
            if check and np.any(relv > tol_feas):
                raise InfeasibleConstraints(
                    f"{label or 'constraints'} inconsistent: relative residual {rel:.3e} > {tol_feas:.1e}",
                    residual=rel, scale=float(np.max(denom)),
                    rows=np.flatnonzero((np.abs(res) if res.ndim == 1 else np.abs(res).max(axis=1)) > tol_feas * np.max(denom)))
        x = xp
        if self.Z.shape[1]:
            g = self.Z.T @ (load - self.M @ xp)
            x = xp + self.Z @ sla.cho_solve(self.chol, g)
        return x, rel

    def multipliers(self, x, load):
        """Minimum-norm multipliers with ``M x - b + B^T lam = 0``."""
        if not self.m:
            return np.zeros(0)
        lam, *_ = np.linalg.lstsq(self.B.T, load - self.M @ x, rcond=None)
        return lam

    def stationarity(self, x, load) -> float:
        """Relative Euler-Lagrange residual: gradient component in the constraint nullspace."""
        g = self.M @ x - load
        gz = self.Z.T @ g
        denom = max(np.linalg.norm(load), np.linalg.norm(self.M @ x), 1e-300)
        return float(np.linalg.norm(gz) / denom)


def solve(problem: KktProblem) -> KktResult:
    s = KktSolver(problem.mass, problem.constraints)
    x, rel = s.solve(problem.load, problem.rhs, problem.tol_feas, problem.scale, problem.label)
    lam = s.multipliers(x, problem.load)
    return KktResult(
        x=x, multipliers=lam, constraint_residual=rel,
        stationarity_residual=s.stationarity(x, problem.load),
        rank=s.rank, nullspace_dim=s.nullspace_dim,
    )


def nullspace_dim(problem: KktProblem) -> int:
    return KktSolver(problem.mass, problem.constraints).nullspace_dim
