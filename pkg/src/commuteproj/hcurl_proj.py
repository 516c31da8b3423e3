"""Stable local commuting projector onto ND_p(T_h) with zero tangential trace on Gamma_N.

Pipeline for ``v`` with ``w = curl v`` (canonical variant):

1. ``tau``, ``sigma^a`` from :mod:`hdiv_proj` applied to ``w``;
2. ``iota`` on each element: ND_p best approximation of ``v`` with ``curl iota = tau``;
3. ``theta^a`` on each patch: RT_{p+1}(T_a) ∩ H_a(div) field closest to
   ``grad psi_a x iota`` with divergence ``Pi^{p+1}(-grad psi_a . w)`` and the same
   elementwise constant moments as ``grad psi_a x iota``;
4. ``delta = sum_a theta^a`` (divergence-free, zero constant moments);
5. ``delta^a`` on each element: divergence-free RT_{p+1} field closest to
   ``I^{RT,p+1}(psi_a delta)`` sharing its normal trace;
6. ``h^a`` on each patch: ND_p(T_a) ∩ H_a(curl) field closest to ``I^{ND,p}(psi_a iota)``
   with ``curl h^a = sigma^a + I^{RT,p}(theta^a - delta^a)``;
7. ``h = sum_a h^a``.

The ``alternative`` variant (p >= 1) works with ``iota`` in ND_{p-1}, ``theta^a``
in RT_p without moment constraints, no ``delta^a`` and
``curl h^a = sigma^a + theta^a`` (so that ``curl h = sigma + delta``).

Feasibility of the patch problems is checked before solving (``check=True``):
the compatibility conditions of ``theta^a`` (zero mean of the divergence datum
away from the Dirichlet boundary and orthogonality against continuous
piecewise-linear test functions) and the requirement that the curl datum of
``h^a`` is a divergence-free member of RT_p(T_a) ∩ H_a(div).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import PatchSystem, solve_patch
from .cls import DEFAULT_TOL_FEAS, FeasibilityError, KktSolver
from .dofmap import local_entity_slices, patch_dofmap
from .fields import BrokenField
from .hdiv_proj import HdivProjection, HdivProjector, _check_variant, default_quad_degree, sample_data
from .interp import (constant_moments, cross_terms, div_matrix, p_projection, product_interp,
                     product_load, rt_reduce)
from .mesh import TetMesh
from .polyspace import curl_map, mesh_elements, space_dimension

FEAS_TOL = 1e-10


@dataclass
class HcurlProjection:
    mesh: TetMesh
    p: int
    variant: str
    hdiv: HdivProjection
    iota: BrokenField
    theta_a: dict
    delta: BrokenField
    delta_a: np.ndarray | None  # (nK, 4, dim RT_{p+1}) canonical only
    h_a: dict
    h: BrokenField
    checks: dict = field(default_factory=dict)

    @property
    def tau(self):
        return self.hdiv.tau

    @property
    def sigma(self):
        return self.hdiv.sigma

    def field(self) -> BrokenField:
        return self.h

    def curl_coeffs(self) -> np.ndarray:
        """RT_p coefficients of curl h on every element."""
        els = mesh_elements(self.mesh)
        return np.array([curl_map(e.space("ND", self.p), e.space("RT", self.p)) @ self.h.coeffs[e.index]
                         for e in els])


def _rel(num, den):
    return float(num / den) if den > 0 else float(num)


class HcurlProjector:
    def __init__(self, mesh: TetMesh, p: int, variant: str = "canonical",
                 quad_degree: int | None = None, tol_feas: float = DEFAULT_TOL_FEAS,
                 check: bool = True, feas_tol: float = FEAS_TOL):
        _check_variant(variant, p)
        self.mesh, self.p, self.variant = mesh, p, variant
        self.quad_degree = default_quad_degree(p) if quad_degree is None else quad_degree
        self.tol_feas, self.check, self.feas_tol = tol_feas, check, feas_tol
        self.hdiv = HdivProjector(mesh, p, variant, self.quad_degree, tol_feas, check)
        self.canonical = variant == "canonical"
        self.piota = p if self.canonical else p - 1
        self.qtheta = p + 1 if self.canonical else p
        self._cache = mesh.__dict__.setdefault("_proj_cache", {})
        self._els = mesh_elements(mesh)
        self._floor = 0.0
        self._wmax = 0.0

    # -- step 2 -----------------------------------------------------------
    def _iota_solver(self, shape):
        key = ("iota", self.piota)
        if key not in shape.cache:
            q = self.piota
            shape.cache[key] = KktSolver(shape.space("ND", q).mass(),
                                         curl_map(shape.space("ND", q), shape.space("RT", q)))
        return shape.cache[key]

    def compute_iota(self, S, tau: np.ndarray):
        q = self.piota
        iota = np.zeros((self.mesh.n_tets, space_dimension("ND", q)))
        res = 0.0
        for (shape, els), (t, wt), V in zip(S.groups, S.rules, S.v):
            load = np.einsum("gnc,knc,n->kg", V, shape.space("ND", q).values(t), wt)
            scale = float(np.abs(tau[els]).max()) if len(els) else 0.0
            x, rel = self._iota_solver(shape).solve(load, tau[els].T, self.tol_feas, scale=scale,
                                                    label="iota", check=self.check)
            iota[els] = x.T
            res = max(res, rel)
        return iota, res

    # -- step 3 -----------------------------------------------------------
    def theta_div_data(self, S) -> tuple[np.ndarray, np.ndarray]:
        """Pi^{q}(-grad lambda_i . w) coefficients and int lambda_j (grad lambda_i . w)."""
        q = self.qtheta
        out = np.zeros((self.mesh.n_tets, 4, space_dimension("P", q)))
        lamint = np.zeros((self.mesh.n_tets, 4, 4))
        for (shape, els), (t, wt), W in zip(S.groups, S.rules, S.w):
            gw = np.einsum("gnc,ic->gin", W, shape.grad_lambda)
            out[els] = p_projection(shape, q, t, wt, -gw)
            lamint[els] = np.einsum("gin,nj,n->gij", gw, shape.lambdas(t), wt)
        return out, lamint

    def theta_system(self, vertex):
        key = ("theta", vertex, self.p, self.variant)
        if key not in self._cache:
            mesh = self.mesh
            patch = mesh.patch(vertex)
            dm = patch_dofmap(mesh, patch, "RT", self.qtheta)
            masses, blocks = [], []
            for k in patch.elements:
                sh = self._els[k].shape
                masses.append(sh.space("RT", self.qtheta).mass())
                B = div_matrix(sh, self.qtheta)
                if self.canonical:
                    B = np.vstack([B, constant_moments(sh, "RT", self.qtheta)])
                blocks.append(B)
            self._cache[key] = PatchSystem(dm, masses, blocks, label=f"theta^a patch {vertex}")
        return self._cache[key]

    def theta_compatibility(self, vertex, iota, ddata, lamint) -> dict:
        """Residuals of the theta^a compatibility conditions (relative)."""
        mesh = self.mesh
        patch = mesh.patch(vertex)
        # (b) zero mean of the divergence datum when the vertex is off the Dirichlet boundary
        mean = 0.0
        mscale = 0.0
        for k in patch.elements:
            i = patch.local_vertex(mesh, k)
            sh = self._els[k].shape
            c0 = ddata[k, i, 0] * sh.volume  # r_0 = 1 in the normalised basis
            mean += c0
            # size of the integrand, so that data vanishing up to round-off are not rejected
            mscale += abs(c0) + abs(lamint[k, i].sum()) + self._wmax * sh.volume * np.linalg.norm(sh.grad_lambda[i])
        out = {"mean": _rel(abs(mean), mscale) if patch.kind != "dirichlet" else 0.0}
        # (c) (grad psi_a x iota, grad q) + (g, q) = 0 for patch hat functions q off gamma_D
        verts = np.unique(mesh.tets_sorted[patch.elements])
        gd_verts = set(np.unique(mesh.faces[list(patch.gamma_d)]).tolist()) if patch.gamma_d else set()
        tot = {int(b): 0.0 for b in verts if int(b) not in gd_verts}
        sc = {b: 0.0 for b in tot}
        for k in patch.elements:
            sh = self._els[k].shape
            i = patch.local_vertex(mesh, k)
            nd_int = constant_moments(sh, "ND", self.piota) @ iota[k] * sh.volume  # int_K iota
            cross = np.cross(sh.grad_lambda[i], nd_int)
            for j, b in enumerate(mesh.tets_sorted[k].tolist()):
                if b not in tot:
                    continue
                t1 = cross @ sh.grad_lambda[j]
                t2 = -lamint[k, i, j]
                tot[b] += t1 + t2
                sc[b] += abs(t1) + abs(t2) + self._wmax * sh.volume * np.linalg.norm(sh.grad_lambda[i])
        worst = 0.0
        for b in tot:
            worst = max(worst, _rel(abs(tot[b]), sc[b]))
        out["orthogonality"] = worst
        return out

    def compute_theta_a(self, vertex, iota, ddata):
        mesh = self.mesh
        patch = mesh.patch(vertex)
        loads, rhs = [], []
        for k in patch.elements:
            sh = self._els[k].shape
            i = patch.local_vertex(mesh, k)
            X, Q = cross_terms(sh, self.piota, i, self.qtheta)
            loads.append(X @ iota[k])
            r = ddata[k, i]
            if self.canonical:
                r = np.concatenate([r, Q @ iota[k]])
            rhs.append(r)
        scale = max(float(np.sqrt(sum(np.sum(r ** 2) for r in rhs))), self._floor)
        coeffs, rel, _ = solve_patch(self.theta_system(vertex), vertex, "theta^a constraints", loads, rhs,
                                     self.tol_feas, scale, self.check)
        return np.asarray(patch.elements), coeffs, rel

    # -- step 5 -----------------------------------------------------------
    def _delta_solver(self, shape):
        key = ("delta_a", self.p)
        if key not in shape.cache:
            q = self.p + 1
            kind, _, _ = local_entity_slices("RT", q)
            E = np.eye(len(kind))[kind == 1]
            B = np.vstack([E, div_matrix(shape, q)])
            shape.cache[key] = (KktSolver(shape.space("RT", q).mass(), B), kind == 1)
        return shape.cache[key]

    def compute_delta_a(self, delta: np.ndarray):
        q = self.p + 1
        out = np.zeros((self.mesh.n_tets, 4, space_dimension("RT", q)))
        res = 0.0
        from .polyspace import shape_groups
        for shape, els in shape_groups(self.mesh):
            solver, fmask = self._delta_solver(shape)
            M = shape.space("RT", q).mass()
            ndiv = div_matrix(shape, q).shape[0]
            for i in range(4):
                T = delta[els] @ product_interp(shape, "RT", q, i).T  # (ng, dim)
                rhs = np.hstack([T[:, fmask], np.zeros((len(els), ndiv))]).T
                scale = max(float(np.abs(T).max()) if T.size else 0.0, self._floor)
                x, rel = solver.solve(M @ T.T, rhs, self.tol_feas, scale=scale, label="delta^a",
                                      check=self.check)
                out[els, i] = x.T
                res = max(res, rel)
        return out, res

    # -- step 6 -----------------------------------------------------------
    def h_system(self, vertex):
        key = ("h", vertex, self.p)
        if key not in self._cache:
            mesh = self.mesh
            patch = mesh.patch(vertex)
            dm = patch_dofmap(mesh, patch, "ND", self.p)
            masses, blocks = [], []
            for k in patch.elements:
                sh = self._els[k].shape
                masses.append(sh.space("ND", self.p).mass())
                blocks.append(curl_map(sh.space("ND", self.p), sh.space("RT", self.p)))
            self._cache[key] = PatchSystem(dm, masses, blocks, label=f"h^a patch {vertex}")
        return self._cache[key]

    def curl_datum(self, vertex, sigma_a, theta_a, delta_a):
        """Per patch element: RT_p coefficients of the prescribed curl of h^a."""
        mesh = self.mesh
        patch = mesh.patch(vertex)
        els, sig = sigma_a[vertex]
        _, th = theta_a[vertex]
        g = []
        for e, k in enumerate(patch.elements):
            sh = self._els[k].shape
            if self.canonical:
                i = patch.local_vertex(mesh, k)
                g.append(sig[e] + rt_reduce(sh, self.p) @ (th[e] - delta_a[k, i]))
            else:
                g.append(sig[e] + th[e])
        return np.array(g)

    def datum_feasibility(self, vertex, g) -> dict:
        """Is g a divergence-free member of RT_p(T_a) ∩ H_a(div)?  Relative residuals."""
        mesh = self.mesh
        patch = mesh.patch(vertex)
        dm = patch_dofmap(mesh, patch, "RT", self.p)
        scale = max(float(np.abs(g).max()), self._floor, 1e-300)
        # shared patch dofs must agree; removed (essential) dofs must vanish
        glob = dm.from_broken(g)
        mism = np.abs(np.where(dm.cell_dofs >= 0, dm.gather(glob) - g, g)).max()
        div = max(np.abs(div_matrix(self._els[k].shape, self.p) @ g[e]).max()
                  for e, k in enumerate(patch.elements))
        return {"conformity": float(mism / scale), "divergence": float(div / scale)}

    def compute_h_a(self, vertex, iota, g):
        mesh = self.mesh
        patch = mesh.patch(vertex)
        loads = []
        for k in patch.elements:
            sh = self._els[k].shape
            i = patch.local_vertex(mesh, k)
            if self.canonical:
                T = product_interp(sh, "ND", self.p, i) @ iota[k]
                loads.append(sh.space("ND", self.p).mass() @ T)
            else:
                loads.append(product_load(sh, "ND", self.p, "ND", self.piota, i) @ iota[k])
        scale = max(float(np.sqrt(np.sum(g ** 2))), self._floor)
        coeffs, rel, _ = solve_patch(self.h_system(vertex), vertex, "h^a constraints", loads, list(g),
                                     self.tol_feas, scale, self.check)
        return np.asarray(patch.elements), coeffs, rel

    # -- driver -----------------------------------------------------------
    def _fail(self, vertex, cond, val):
        raise FeasibilityError(f"patch {vertex}: {cond} residual {val:.3e} exceeds {self.feas_tol:.1e}",
                               vertex, cond, val)

    def apply(self, v) -> HcurlProjection:
        mesh = self.mesh
        S = sample_data(mesh, None, self.quad_degree, v=v)
        hd = self.hdiv.apply_samples(S)
        tau = hd.tau.coeffs
        iota, r_iota = self.compute_iota(S, tau)
        ddata, lamint = self.theta_div_data(S)
        self._wmax = max((float(np.abs(W).max()) for W in S.w if W.size), default=0.0)
        # absolute floor for feasibility tests: data that vanish up to round-off are not rejected
        self._floor = max(float(np.abs(tau).max()), float(np.abs(iota).max()),
                          float(np.abs(hd.sigma.coeffs).max())) if mesh.n_tets else 0.0
        checks = {"tau_constraint": hd.residuals["tau_constraint"],
                  "sigma_a_constraint": hd.residuals["sigma_a_constraint"],
                  "iota_constraint": r_iota}
        theta_a = {}
        delta = np.zeros((mesh.n_tets, space_dimension("RT", self.qtheta)))
        worst = {"theta_mean": 0.0, "theta_orthogonality": 0.0, "theta_constraint": 0.0}
        for a in range(mesh.n_vertices):
            comp = self.theta_compatibility(a, iota, ddata, lamint)
            worst["theta_mean"] = max(worst["theta_mean"], comp["mean"])
            worst["theta_orthogonality"] = max(worst["theta_orthogonality"], comp["orthogonality"])
            if self.check:
                for name, val in comp.items():
                    if val > self.feas_tol:
                        self._fail(a, f"theta^a compatibility ({name})", val)
            els, c, rel = self.compute_theta_a(a, iota, ddata)
            theta_a[a] = (els, c)
            delta[els] += c
            worst["theta_constraint"] = max(worst["theta_constraint"], rel)
        checks.update(worst)
        checks.update(self._delta_checks(delta, theta_a))
        delta_a = None
        if self.canonical:
            delta_a, r_dl = self.compute_delta_a(delta)
            checks["delta_a_constraint"] = r_dl
            checks.update(self._delta_a_checks(delta, delta_a))
        h = np.zeros((mesh.n_tets, space_dimension("ND", self.p)))
        h_a = {}
        fz = {"datum_conformity": 0.0, "datum_divergence": 0.0, "h_constraint": 0.0}
        for a in range(mesh.n_vertices):
            g = self.curl_datum(a, hd.sigma_a, theta_a, delta_a)
            feas = self.datum_feasibility(a, g)
            fz["datum_conformity"] = max(fz["datum_conformity"], feas["conformity"])
            fz["datum_divergence"] = max(fz["datum_divergence"], feas["divergence"])
            if self.check:
                for name, val in feas.items():
                    if val > self.feas_tol:
                        self._fail(a, f"curl datum {name}", val)
            els, c, rel = self.compute_h_a(a, iota, g)
            h_a[a] = (els, c)
            h[els] += c
            fz["h_constraint"] = max(fz["h_constraint"], rel)
        checks.update(fz)
        return HcurlProjection(
            mesh, self.p, self.variant, hd,
            BrokenField(mesh, "ND", self.piota, iota, "iota"), theta_a,
            BrokenField(mesh, "RT", self.qtheta, delta, "delta"), delta_a, h_a,
            BrokenField(mesh, "ND", self.p, h, "h"), checks,
        )

    def _delta_checks(self, delta, theta_a):
        scale = max(float(np.abs(delta).max()), max(float(np.abs(c).max()) for _, c in theta_a.values()), 1e-300)
        div = max(np.abs(div_matrix(e.shape, self.qtheta) @ delta[e.index]).max() for e in self._els)
        out = {"delta_divergence": div / scale}
        if self.canonical:
            mom = max(np.abs(constant_moments(e.shape, "RT", self.qtheta) @ delta[e.index]).max() for e in self._els)
            out["delta_moments"] = mom / scale
        return out

    def _delta_a_checks(self, delta, delta_a):
        scale = max(float(np.abs(delta_a).max()), float(np.abs(delta).max()), 1e-300)
        dsum = np.abs(delta_a.sum(axis=1) - delta).max()
        div = max(np.abs(delta_a[e.index] @ div_matrix(e.shape, self.p + 1).T).max() for e in self._els)
        return {"delta_a_sum": float(dsum / scale), "delta_a_divergence": float(div / scale)}


# -- module-level operations -------------------------------------------------

def phc_apply(mesh: TetMesh, v, p: int, variant: str = "canonical", **kw) -> HcurlProjection:
    return HcurlProjector(mesh, p, variant, **kw).apply(v)


def phc_iota(v, element, p: int, tau_coeffs, quad_degree: int | None = None):
    """Constrained ND_p best approximation of ``v`` on one element with curl = tau."""
    from .polyspace import LocalField
    deg = default_quad_degree(p) if quad_degree is None else quad_degree
    sh = element.shape
    t, wt = sh.volume_rule(deg)
    V = np.asarray(v.value(element.to_phys(t)) if hasattr(v, "value") else v(element.to_phys(t)))
    load = np.einsum("nc,knc,n->k", V, sh.space("ND", p).values(t), wt)
    solver = KktSolver(sh.space("ND", p).mass(), curl_map(sh.space("ND", p), sh.space("RT", p)))
    x, _ = solver.solve(load, tau_coeffs)
    return LocalField(element, sh.space("ND", p), x)


def phc_theta(mesh: TetMesh, vertex: int, iota: np.ndarray, v, p: int, variant: str = "canonical", **kw):
    """theta^a on one patch from broken iota coefficients; returns (elements, coefficients)."""
    proj = HcurlProjector(mesh, p, variant, **kw)
    S = sample_data(mesh, None, proj.quad_degree, v=v)
    ddata, lamint = proj.theta_div_data(S)
    proj._wmax = max((float(np.abs(W).max()) for W in S.w if W.size), default=0.0)
    proj._floor = float(np.abs(iota).max()) if np.size(iota) else 0.0
    if proj.check:
        for name, val in proj.theta_compatibility(vertex, iota, ddata, lamint).items():
            if val > proj.feas_tol:
                proj._fail(vertex, f"theta^a compatibility ({name})", val)
    els, c, _ = proj.compute_theta_a(vertex, iota, ddata)
    return els, c


def phc_delta(mesh: TetMesh, theta_a: dict, p: int, variant: str = "canonical") -> BrokenField:
    """delta = sum of the patch fields theta^a (extended by zero)."""
    q = p + 1 if variant == "canonical" else p
    delta = np.zeros((mesh.n_tets, space_dimension("RT", q)))
    for a in sorted(theta_a):
        els, c = theta_a[a]
        delta[els] += c
    return BrokenField(mesh, "RT", q, delta, "delta")


def phc_delta_split(element, delta_coeffs, i: int, p: int, tol_feas: float = DEFAULT_TOL_FEAS):
    """delta^a on one element for its local vertex i: divergence-free RT_{p+1} field
    closest to I^{RT,p+1}(lambda_i delta) with the same normal trace."""
    from .polyspace import LocalField
    sh = element.shape
    q = p + 1
    kind, _, _ = local_entity_slices("RT", q)
    B = np.vstack([np.eye(len(kind))[kind == 1], div_matrix(sh, q)])
    T = product_interp(sh, "RT", q, i) @ np.asarray(delta_coeffs)
    rhs = np.concatenate([T[kind == 1], np.zeros(B.shape[0] - int(np.sum(kind == 1)))])
    M = sh.space("RT", q).mass()
    x, _ = KktSolver(M, B).solve(M @ T, rhs, tol_feas, scale=float(np.abs(T).max()), label="delta^a")
    return LocalField(element, sh.space("RT", q), x)


def phc_h_a(mesh: TetMesh, vertex: int, iota: np.ndarray, sigma_a: dict, theta_a: dict,
            delta_a, p: int, variant: str = "canonical", **kw):
    """h^a on one patch; the curl datum is checked for feasibility first."""
    proj = HcurlProjector(mesh, p, variant, **kw)
    g = proj.curl_datum(vertex, sigma_a, theta_a, delta_a)
    proj._floor = float(np.abs(iota).max()) if np.size(iota) else 0.0
    if proj.check:
        for name, val in proj.datum_feasibility(vertex, g).items():
            if val > proj.feas_tol:
                proj._fail(vertex, f"curl datum {name}", val)
    els, c, _ = proj.compute_h_a(vertex, iota, g)
    return els, c


def commute_residual(result: HcurlProjection) -> tuple[float, float]:
    """(||curl h - sigma||, ||sigma||) in L2, from exact element masses."""
    els = mesh_elements(result.mesh)
    C = result.curl_coeffs()
    target = result.sigma.coeffs
    if result.variant != "canonical":
        target = target + result.delta.coeffs
    num = den = 0.0
    for e in els:
        M = e.space("RT", result.p).mass()
        d = C[e.index] - target[e.index]
        num += d @ M @ d
        den += target[e.index] @ M @ target[e.index]
    return float(np.sqrt(num)), float(np.sqrt(den))


__all__ = ["HcurlProjector", "HcurlProjection", "FeasibilityError", "phc_apply", "phc_iota",
           "phc_theta", "phc_delta", "phc_delta_split", "phc_h_a", "commute_residual"]
