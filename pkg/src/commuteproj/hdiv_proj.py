"""Stable local commuting projector onto RT_p(T_h) with zero normal trace on Gamma_N.

Given ``w`` (analytic callbacks or a broken polynomial field):

1. ``tau`` on every element: the RT_p best approximation of ``w`` whose
   divergence is the elementwise L2 projection of ``div w``;
2. ``sigma^a`` on every vertex patch: the RT_p(T_a) ∩ H_a(div) field closest to
   the canonical RT_p interpolant of ``psi_a tau`` whose divergence is the
   projection of ``psi_a div w + grad psi_a . w`` (note: ``w``, not ``tau``);
3. ``sigma = sum_a sigma^a``.

The ``alternative`` variant (p >= 1) uses ``tau`` in RT_{p-1} with zero
divergence, drops the interpolator (target ``psi_a tau``) and imposes
``div sigma^a = Pi^p(grad psi_a . w)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import PatchSystem, solve_patch
from .cls import DEFAULT_TOL_FEAS, KktSolver
from .dofmap import patch_dofmap
from .fields import BrokenField, sample
from .interp import div_matrix, p_projection, product_interp, product_load
from .mesh import TetMesh
from .polyspace import LocalField, mesh_elements, shape_groups, space_dimension
from .quadrature import MAX_DEGREE

VARIANTS = ("canonical", "alternative")


def default_quad_degree(p: int) -> int:
    """Quadrature degree used for analytic data (see the README for the reasoning)."""
    return min(MAX_DEGREE, 2 * p + 14)


def _check_variant(variant, p):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "alternative" and p < 1:
        raise ValueError("the alternative variant needs p >= 1")


@dataclass
class Samples:
    """Per shape group: rule, and sampled values of w (and optionally v)."""

    groups: list
    rules: list
    w: list
    divw: list
    v: list | None = None


def sample_data(mesh: TetMesh, w, degree: int, v=None, div_zero: bool = False) -> Samples:
    groups = shape_groups(mesh)
    rules, W, D, V = [], [], [], []
    for shape, els in groups:
        t, wt = shape.volume_rule(degree)
        rules.append((t, wt))
        if v is not None:
            V.append(sample(v, mesh, els, shape, t, "value"))
            W.append(sample(v, mesh, els, shape, t, "curl"))
        else:
            W.append(sample(w, mesh, els, shape, t, "value"))
        if div_zero or v is not None:
            D.append(np.zeros(W[-1].shape[:2]))
        else:
            D.append(sample(w, mesh, els, shape, t, "div"))
    return Samples(groups, rules, W, D, V if v is not None else None)


@dataclass
class HdivProjection:
    mesh: TetMesh
    p: int
    variant: str
    tau: BrokenField
    sigma_a: dict
    sigma: BrokenField
    div_data: np.ndarray  # (nK, 4, dim P_p): projected patch divergence data per local vertex
    residuals: dict = field(default_factory=dict)

    def field(self) -> BrokenField:
        return self.sigma


class HdivProjector:
    def __init__(self, mesh: TetMesh, p: int, variant: str = "canonical",
                 quad_degree: int | None = None, tol_feas: float = DEFAULT_TOL_FEAS,
                 check: bool = True):
        _check_variant(variant, p)
        self.mesh, self.p, self.variant = mesh, p, variant
        self.quad_degree = default_quad_degree(p) if quad_degree is None else quad_degree
        self.tol_feas = tol_feas
        self.check = check
        self.ptau = p if variant == "canonical" else p - 1
        self._cache = mesh.__dict__.setdefault("_proj_cache", {})
        self._floor = 0.0

    # -- step 1 ----------------------------------------------------------
    def _tau_solver(self, shape):
        key = ("tau", self.ptau, self.variant)
        c = shape.cache
        if key not in c:
            q = self.ptau
            c[key] = KktSolver(shape.space("RT", q).mass(), div_matrix(shape, q))
        return c[key]

    def compute_tau(self, S: Samples):
        mesh, q = self.mesh, self.ptau
        tau = np.zeros((mesh.n_tets, space_dimension("RT", q)))
        resid = 0.0
        for (shape, els), (t, wt), W, D in zip(S.groups, S.rules, S.w, S.divw):
            V = shape.space("RT", q).values(t)
            load = np.einsum("gnc,knc,n->kg", W, V, wt)
            if self.variant == "canonical":
                rhs = p_projection(shape, self.p, t, wt, D).T
            else:
                rhs = np.zeros((div_matrix(shape, q).shape[0], len(els)))
            x, rel = self._tau_solver(shape).solve(load, rhs, self.tol_feas, label="tau", check=self.check)
            tau[els] = x.T
            resid = max(resid, rel)
        return tau, resid

    # -- step 2 ----------------------------------------------------------
    def patch_div_data(self, S: Samples) -> np.ndarray:
        """Projected divergence data for every (element, local vertex)."""
        p = self.p
        out = np.zeros((self.mesh.n_tets, 4, space_dimension("P", p)))
        for (shape, els), (t, wt), W, D in zip(S.groups, S.rules, S.w, S.divw):
            lam = shape.lambdas(t)
            gw = np.einsum("gnc,ic->gin", W, shape.grad_lambda)
            if self.variant == "canonical":
                vals = gw + lam.T[None] * D[:, None, :]
            else:
                vals = gw
            out[els] = p_projection(shape, p, t, wt, vals)
        return out

    def patch_system(self, vertex: int) -> PatchSystem:
        key = ("sigma", vertex, self.p, self.variant)
        if key not in self._cache:
            mesh = self.mesh
            patch = mesh.patch(vertex)
            dm = patch_dofmap(mesh, patch, "RT", self.p)
            els = mesh_elements(mesh)
            masses = [els[k].shape.space("RT", self.p).mass() for k in patch.elements]
            blocks = [div_matrix(els[k].shape, self.p) for k in patch.elements]
            self._cache[key] = PatchSystem(dm, masses, blocks, label=f"sigma^a patch {vertex}")
        return self._cache[key]

    def compute_sigma_a(self, vertex: int, tau: np.ndarray, div_data: np.ndarray):
        mesh = self.mesh
        patch = mesh.patch(vertex)
        els = mesh_elements(mesh)
        loads, rhs = [], []
        for k in patch.elements:
            sh = els[k].shape
            i = patch.local_vertex(mesh, k)
            if self.variant == "canonical":
                T = product_interp(sh, "RT", self.p, i) @ tau[k]
                loads.append(sh.space("RT", self.p).mass() @ T)
            else:
                loads.append(product_load(sh, "RT", self.p, "RT", self.ptau, i) @ tau[k])
            rhs.append(div_data[k, i])
        system = self.patch_system(vertex)
        scale = max(float(np.sqrt(sum(np.sum(r ** 2) for r in rhs))), self._floor)
        coeffs, rel, _ = solve_patch(system, vertex, "sigma^a constraints", loads, rhs, self.tol_feas, scale,
                                     self.check)
        return np.asarray(patch.elements), coeffs, rel

    # -- driver ----------------------------------------------------------
    def apply_samples(self, S: Samples) -> HdivProjection:
        mesh = self.mesh
        tau, r_tau = self.compute_tau(S)
        data = self.patch_div_data(S)
        # absolute floor for the feasibility test: divergence data that vanish up to round-off
        self._floor = float(np.abs(tau).max()) if tau.size else 0.0
        sigma = np.zeros((mesh.n_tets, space_dimension("RT", self.p)))
        sigma_a = {}
        r_sig = 0.0
        for a in range(mesh.n_vertices):
            els, c, rel = self.compute_sigma_a(a, tau, data)
            sigma_a[a] = (els, c)
            sigma[els] += c
            r_sig = max(r_sig, rel)
        return HdivProjection(
            mesh, self.p, self.variant,
            BrokenField(mesh, "RT", self.ptau, tau, "tau"), sigma_a,
            BrokenField(mesh, "RT", self.p, sigma, "sigma"), data,
            {"tau_constraint": r_tau, "sigma_a_constraint": r_sig},
        )

    def apply(self, w, div_zero: bool = False) -> HdivProjection:
        return self.apply_samples(sample_data(self.mesh, w, self.quad_degree, div_zero=div_zero))


# -- module-level operations --------------------------------------------------

def phd_tau(w, element, p: int, quad_degree: int | None = None, variant: str = "canonical"):
    """Elementwise constrained RT best approximation of ``w`` on one element."""
    _check_variant(variant, p)
    q = p if variant == "canonical" else p - 1
    deg = default_quad_degree(p) if quad_degree is None else quad_degree
    shape = element.shape
    t, wt = shape.volume_rule(deg)
    x = element.to_phys(t)
    W = np.asarray(w.value(x) if hasattr(w, "value") else w(x))
    V = shape.space("RT", q).values(t)
    load = np.einsum("nc,knc,n->k", W, V, wt)
    B = div_matrix(shape, q)
    if variant == "canonical":
        divw = w.div(x) if hasattr(w, "div") else np.zeros(len(t))
        rhs = p_projection(shape, p, t, wt, divw)
    else:
        rhs = np.zeros(B.shape[0])
    x_, _ = KktSolver(shape.space("RT", q).mass(), B).solve(load, rhs)
    return LocalField(element, shape.space("RT", q), x_)


def phd_apply(mesh: TetMesh, w, p: int, variant: str = "canonical", **kw) -> HdivProjection:
    return HdivProjector(mesh, p, variant, **kw).apply(w)


def phd_sigma_a(mesh: TetMesh, vertex: int, w, p: int, variant: str = "canonical", **kw):
    """sigma^a on one patch (computes tau on the whole mesh first)."""
    proj = HdivProjector(mesh, p, variant, **kw)
    S = sample_data(mesh, w, proj.quad_degree)
    tau, _ = proj.compute_tau(S)
    proj._floor = float(np.abs(tau).max()) if tau.size else 0.0
    els, c, _ = proj.compute_sigma_a(vertex, tau, proj.patch_div_data(S))
    return els, c
