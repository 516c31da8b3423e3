"""Global best approximations in the conforming ND / RT spaces.

Quantities compared here (all squared L2 quantities, summed over elements):

* ``m2``: min over conforming ND_p of ||v - v_h||^2 + sum_K (h_K/(p+1))^2 ||curl(v - v_h)||_K^2;
* constrained best: min of ||v - v_h||^2 over conforming ND_p with a prescribed curl;
* local best: sum_K min over ND_q(K) of ||v - v_h||_K^2;
* oscillation: sum_K (h_K/(q+1))^2 ||curl v - Pi^{RT,q}(curl v)||_K^2.

Global systems are assembled sparse and solved directly.  The divergence-free
RT projection ``mixed_pi_div`` is solved with the dense nullspace KKT engine;
the three-field mixed system is a separate sparse saddle-point solve, so the
two can be checked against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cls import DEFAULT_TOL_FEAS, InfeasibleConstraints, KktSolver
from .dofmap import DofMap, global_dofmap
from .fields import BrokenField, CurlView, sample
from .hdiv_proj import HdivProjector, default_quad_degree, sample_data
from .interp import div_matrix, project_values
from .mesh import TetMesh
from .polyspace import curl_map, shape_groups, space_dimension


def assemble_matrix(n_rows: int, n_cols: int, pieces) -> sp.csr_matrix:
    """Sum of local blocks.  ``pieces`` yields (row_ids (g, a), col_ids (g, b), blocks (g, a, b)).

    Negative ids mark removed DOFs and are skipped.
    """
    R, C, V = [], [], []
    for rows, cols, blocks in pieces:
        rr = np.broadcast_to(rows[:, :, None], blocks.shape)
        cc = np.broadcast_to(cols[:, None, :], blocks.shape)
        keep = (rr >= 0) & (cc >= 0)
        R.append(rr[keep])
        C.append(cc[keep])
        V.append(blocks[keep])
    if not R:
        return sp.csr_matrix((n_rows, n_cols))
    return sp.coo_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                         shape=(n_rows, n_cols)).tocsr()


DIRECT_LIMIT = 5000


def solve_spd(A, b, rtol: float = 1e-14) -> np.ndarray:
    """Symmetric positive definite solve: sparse LU for small systems, Jacobi-scaled CG above
    DIRECT_LIMIT unknowns (the systems here are spectrally close to a mass matrix)."""
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= DIRECT_LIMIT:
        return spla.spsolve(A.tocsc(), b)
    d = 1.0 / np.sqrt(A.diagonal())
    S = sp.diags(d) @ A @ sp.diags(d)
    y, info = spla.cg(S, d * b, rtol=rtol, maxiter=20 * n)
    if info != 0:
        return spla.spsolve(A.tocsc(), b)
    return d * y


def _weights(mesh: TetMesh, els, p: int) -> np.ndarray:
    return (mesh.h[els] / (p + 1)) ** 2


class ConformingSystem:
    """ND_p or RT_p conforming space (zero trace on Neumann faces) with assembled matrices."""

    def __init__(self, mesh: TetMesh, family: str, p: int, bc: bool = True):
        if family not in ("ND", "RT"):
            raise ValueError("conforming systems exist for ND and RT only")
        self.mesh, self.family, self.p = mesh, family, p
        self.dofmap = global_dofmap(mesh, family, p, bc)
        self.n = self.dofmap.n_dofs
        self._mats: dict = {}

    # -- matrices ---------------------------------------------------------
    def _local(self, shape_fn):
        dm = self.dofmap
        for shape, els in shape_groups(self.mesh):
            rows = dm.cell_dofs[els]
            yield rows, rows, shape_fn(shape, els)

    @property
    def mass(self) -> sp.csr_matrix:
        if "mass" not in self._mats:
            def fn(shape, els):
                M = shape.space(self.family, self.p).mass()
                return np.broadcast_to(M, (len(els),) + M.shape)
            self._mats["mass"] = assemble_matrix(self.n, self.n, self._local(fn))
        return self._mats["mass"]

    def weighted_curl(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        """sum_K weights_K (curl phi_i, curl phi_j)_K; weights default to (h_K/(p+1))^2."""
        if self.family != "ND":
            raise ValueError("curl matrix only for ND")
        w = _weights(self.mesh, np.arange(self.mesh.n_tets), self.p) if weights is None else np.asarray(weights)

        def fn(shape, els):
            nd, rt = shape.space("ND", self.p), shape.space("RT", self.p)
            C = curl_map(nd, rt)
            A = C.T @ rt.mass() @ C
            return w[els][:, None, None] * A[None]
        return assemble_matrix(self.n, self.n, self._local(fn))

    def curl_coupling(self, rt: "ConformingSystem") -> sp.csr_matrix:
        """(curl phi_j, psi_r): rows RT dofs, columns ND dofs."""
        def pieces():
            for shape, els in shape_groups(self.mesh):
                nd, rts = shape.space("ND", self.p), shape.space("RT", self.p)
                K = rts.mass() @ curl_map(nd, rts)
                yield rt.dofmap.cell_dofs[els], self.dofmap.cell_dofs[els], np.broadcast_to(K, (len(els),) + K.shape)
        return assemble_matrix(rt.n, self.n, pieces())

    def div_rows(self) -> sp.csr_matrix:
        """(s, div psi_j)_K for the orthonormal broken P_p basis s: rows element-major."""
        if self.family != "RT":
            raise ValueError("divergence rows only for RT")
        nP = space_dimension("P", self.p)

        def pieces():
            for shape, els in shape_groups(self.mesh):
                D = div_matrix(shape, self.p) * shape.volume
                rows = els[:, None] * nP + np.arange(nP)[None]
                yield rows, self.dofmap.cell_dofs[els], np.broadcast_to(D, (len(els),) + D.shape)
        return assemble_matrix(self.mesh.n_tets * nP, self.n, pieces())

    # -- vectors ----------------------------------------------------------
    def load(self, f, what: str = "value", quad_degree: int | None = None) -> np.ndarray:
        """(f, phi) for what='value' or (curl f, curl phi) for what='curl'."""
        deg = default_quad_degree(self.p) if quad_degree is None else quad_degree
        out = np.zeros(self.n)
        for shape, els in shape_groups(self.mesh):
            t, w = shape.volume_rule(deg)
            sp_ = shape.space(self.family, self.p)
            F = sample(f, self.mesh, els, shape, t, what)
            B = sp_.values(t) if what == "value" else sp_.curls(t)
            loc = np.einsum("gnc,knc,n->gk", F, B, w)
            out += _scatter(self.dofmap, els, loc, self.n)
        return out

    def to_broken(self, x: np.ndarray, name: str = "discrete") -> BrokenField:
        return BrokenField(self.mesh, self.family, self.p, self.dofmap.gather(x), name)

    def from_broken(self, f: BrokenField, check_tol: float | None = 1e-10) -> np.ndarray:
        scale = max(float(np.abs(f.coeffs).max()), 1.0) if f.coeffs.size else 1.0
        return self.dofmap.from_broken(f.coeffs, None if check_tol is None else check_tol * scale)


def _scatter(dm: DofMap, els, loc, n):
    out = np.zeros(n + 1)
    np.add.at(out, dm.cell_dofs[els], loc)
    return out[:-1]


def _systems(mesh, p):
    cache = mesh.__dict__.setdefault("_global_cache", {})
    key = ("systems", p)
    if key not in cache:
        cache[key] = (ConformingSystem(mesh, "ND", p), ConformingSystem(mesh, "RT", p))
    return cache[key]


# ---------------------------------------------------------------------------
# error functionals by quadrature

def error_terms(mesh: TetMesh, v, vh: BrokenField, quad_degree: int | None = None):
    """Per element: ||v - v_h||_K^2 and ||curl(v - v_h)||_K^2."""
    deg = default_quad_degree(vh.q) if quad_degree is None else quad_degree
    e0 = np.zeros(mesh.n_tets)
    e1 = np.zeros(mesh.n_tets)
    for shape, els in shape_groups(mesh):
        t, w = shape.volume_rule(deg)
        for what, out in (("value", e0), ("curl", e1)):
            d = sample(v, mesh, els, shape, t, what) - vh.sample(els, t, what)
            out[els] = np.einsum("gnc,gnc,n->g", d, d, w)
    return e0, e1


# ---------------------------------------------------------------------------
# global problems

def global_unconstrained_best(mesh: TetMesh, v, p: int, quad_degree: int | None = None):
    """Minimiser of ||v - v_h||^2 + sum_K (h_K/(p+1))^2 ||curl(v - v_h)||_K^2 and its value m^2."""
    nd, _ = _systems(mesh, p)
    A = (nd.mass + nd.weighted_curl()).tocsr()
    w = _weights(mesh, np.arange(mesh.n_tets), p)
    b = nd.load(v, "value", quad_degree) + _weighted_curl_load(nd, v, w, quad_degree)
    vh = nd.to_broken(solve_spd(A, b), "global best")
    e0, e1 = error_terms(mesh, v, vh, quad_degree)
    return vh, float(np.sum(e0 + w * e1))


def _weighted_curl_load(nd: ConformingSystem, v, weights, quad_degree):
    deg = default_quad_degree(nd.p) if quad_degree is None else quad_degree
    out = np.zeros(nd.n)
    for shape, els in shape_groups(nd.mesh):
        t, w = shape.volume_rule(deg)
        F = sample(v, nd.mesh, els, shape, t, "curl")
        loc = np.einsum("gnc,knc,n->gk", F, shape.space("ND", nd.p).curls(t), w) * weights[els][:, None]
        out += _scatter(nd.dofmap, els, loc, nd.n)
    return out


@dataclass
class MixedSolution:
    v: BrokenField  # ND_p conforming
    p_field: BrokenField  # RT_p conforming, divergence-free multiplier
    q: np.ndarray  # broken P_p multiplier coefficients (nK, dim P_p)
    curl: BrokenField  # curl of v in RT_p


def three_field_mixed(mesh: TetMesh, v, p: int, curl_rhs=None, quad_degree: int | None = None) -> MixedSolution:
    """Solve the three-field mixed system for (v_h, p_h, q_h).

    The second equation's right-hand side is ``(curl v, r)`` by default, or
    ``(curl_rhs, r)`` for a conforming RT_p BrokenField ``curl_rhs``.  The
    multiplier ``q_h`` has zero mean when no Dirichlet faces exist.
    """
    nd, rt = _systems(mesh, p)
    K = nd.curl_coupling(rt)
    D = rt.div_rows()
    nq = D.shape[0]
    blocks = [[nd.mass, K.T, None], [K, None, D.T], [None, D, None]]
    pin = not mesh.has_dirichlet()
    if pin:
        # zero-mean multiplier: the constant rows of div are redundant when traces vanish everywhere
        nP = space_dimension("P", p)
        m = np.zeros((1, nq))
        m[0, ::nP] = mesh.volume
        M1 = sp.csr_matrix(m)
        blocks = [[nd.mass, K.T, None, None], [K, None, D.T, None], [None, D, None, M1.T],
                  [None, None, M1, None]]
    A = sp.bmat(blocks, format="csc")
    b1 = nd.load(v, "value", quad_degree)
    if curl_rhs is None:
        b2 = _curl_load_rt(rt, v, quad_degree)
    else:
        b2 = rt.mass @ rt.from_broken(curl_rhs)
    rhs = np.concatenate([b1, b2, np.zeros(nq + (1 if pin else 0))])
    sol = spla.spsolve(A, rhs)
    x, y, q = sol[:nd.n], sol[nd.n:nd.n + rt.n], sol[nd.n + rt.n:nd.n + rt.n + nq]
    vh = nd.to_broken(x, "mixed v_h")
    return MixedSolution(vh, rt.to_broken(y, "mixed p_h"), q.reshape(mesh.n_tets, -1), vh.curl_field())


def _curl_load_rt(rt: ConformingSystem, v, quad_degree):
    deg = default_quad_degree(rt.p) if quad_degree is None else quad_degree
    out = np.zeros(rt.n)
    for shape, els in shape_groups(rt.mesh):
        t, w = shape.volume_rule(deg)
        F = sample(v, rt.mesh, els, shape, t, "curl")
        loc = np.einsum("gnc,knc,n->gk", F, shape.space("RT", rt.p).values(t), w)
        out += _scatter(rt.dofmap, els, loc, rt.n)
    return out


def global_constrained_best(mesh: TetMesh, v, p: int, curl_target: BrokenField | None = None,
                            quad_degree: int | None = None, tol_feas: float = 1e-8):
    """min ||v - v_h||^2 over conforming ND_p with curl v_h = curl_target.

    ``curl_target`` defaults to the local commuting RT projection of curl v.
    Returns (minimiser, value).  Raises InfeasibleConstraints when the target
    is not the curl of a conforming ND_p field.
    """
    if curl_target is None:
        proj = HdivProjector(mesh, p, quad_degree=quad_degree)
        curl_target = proj.apply_samples(sample_data(mesh, None, proj.quad_degree, v=v)).sigma
    _, rt = _systems(mesh, p)
    try:
        rt.from_broken(curl_target, check_tol=tol_feas)
    except ValueError as exc:
        raise InfeasibleConstraints(f"curl target is not in conforming RT_{p} ({exc}); "
                                    f"relative residual undefined", residual=np.inf) from exc
    sol = three_field_mixed(mesh, v, p, curl_rhs=curl_target, quad_degree=quad_degree)
    d = rt.from_broken(sol.curl, None) - rt.from_broken(curl_target, None)
    M = rt.mass
    t = rt.from_broken(curl_target, None)
    num = float(np.sqrt(max(d @ (M @ d), 0.0)))
    den = float(np.sqrt(max(t @ (M @ t), 0.0)))
    rel = num / den if den > 0 else num
    if rel > tol_feas:
        raise InfeasibleConstraints(f"curl target is not attained by conforming ND_{p} fields "
                                    f"(relative residual {rel:.3e})", residual=rel, scale=den)
    e0, _ = error_terms(mesh, v, sol.v, quad_degree)
    return sol.v, float(np.sum(e0))


def mixed_pi_div(mesh: TetMesh, w, p: int, quad_degree: int | None = None,
                 tol_feas: float = DEFAULT_TOL_FEAS) -> BrokenField:
    """L2 projection of ``w`` onto divergence-free conforming RT_p (dense nullspace KKT).

    ``w`` is sampled through its ``value`` callback.
    """
    _, rt = _systems(mesh, p)
    M = rt.mass.toarray()
    B = rt.div_rows().toarray()
    b = rt.load(w, "value", quad_degree)
    x, _ = KktSolver(M, B).solve(b, np.zeros(B.shape[0]), tol_feas, label="divergence-free RT projection")
    return rt.to_broken(x, "Pi div")


# ---------------------------------------------------------------------------
# local quantities

def localbest_terms(mesh: TetMesh, v, q: int, quad_degree: int | None = None, weight_degree: int | None = None):
    """Per element: min over ND_q(K) of ||v - v_h||_K^2 and the squared oscillation
    (h_K/(r+1))^2 ||curl v - Pi^{RT,q}(curl v)||_K^2 with r = weight_degree (default q)."""
    deg = default_quad_degree(q) if quad_degree is None else quad_degree
    r = q if weight_degree is None else weight_degree
    lb = np.zeros(mesh.n_tets)
    osc = np.zeros(mesh.n_tets)
    for shape, els in shape_groups(mesh):
        t, w = shape.volume_rule(deg)
        for fam, what, out in (("ND", "value", lb), ("RT", "curl", osc)):
            F = sample(v, mesh, els, shape, t, what)
            c = project_values(shape, fam, q, t, w, F)
            d = F - np.tensordot(c, shape.space(fam, q).values(t), axes=(1, 0))
            out[els] = np.einsum("gnc,gnc,n->g", d, d, w)
    osc *= (mesh.h / (r + 1)) ** 2
    return lb, osc


def localbest_sum(mesh: TetMesh, v, p: int, quad_degree: int | None = None):
    """(sum_K localbest_K^2, sum_K oscillation_K^2)."""
    lb, osc = localbest_terms(mesh, v, p, quad_degree)
    return float(lb.sum()), float(osc.sum())


ZERO_REL = 1e-20


def _ratio(num, den, tol=1e-28):
    """num/den, with 0/0 := 1 (both below ``tol``, an absolute round-off level)."""
    if den <= tol:
        return 1.0 if num <= tol else np.inf
    return num / den


@dataclass
class EquivReport:
    p: int
    m2: float
    constrained: float  # min ||v - v_h||^2 with curl v_h = Phi^div(curl v)
    localbest: np.ndarray  # per element, squared
    oscillation: np.ndarray  # per element, squared (weight (h_K/(p+1))^2)
    ratio_constrained: float
    ratio_unconstrained: float
    mixed: float | None = None  # same as constrained with the global divergence-free projection
    ratio_mixed: float | None = None
    hp_terms: np.ndarray | None = None  # per element [v_{K,p+1,0,0}]^2
    extra: dict = field(default_factory=dict)

    @property
    def right(self) -> float:
        return float(self.localbest.sum() + self.oscillation.sum())


def equivalence_report(mesh: TetMesh, v, p: int, quad_degree: int | None = None, mixed: bool = False,
                       gamma_d_check: bool = True) -> EquivReport:
    """Both sides of the constrained and unconstrained local-global equivalences."""
    lb, osc = localbest_terms(mesh, v, p, quad_degree)
    right = float(lb.sum() + osc.sum())
    hp = hp_terms(mesh, v, p + 1, quad_degree)
    # squared quantities below this are round-off relative to the size of v
    tol = ZERO_REL * max(float(hp.sum()), 1e-300)
    _, m2 = global_unconstrained_best(mesh, v, p, quad_degree)
    _, cons = global_constrained_best(mesh, v, p, quad_degree=quad_degree)
    rep = EquivReport(p, m2, cons, lb, osc,
                      _ratio(cons + osc.sum(), right, tol), _ratio(m2, right, tol))
    if mixed:
        target = mixed_pi_div(mesh, CurlView(v), p, quad_degree)
        _, val = global_constrained_best(mesh, v, p, curl_target=target, quad_degree=quad_degree)
        rep.mixed = val
        rep.ratio_mixed = _ratio(val + osc.sum(), right, tol)
    rep.hp_terms = hp
    return rep


def hp_terms(mesh: TetMesh, v, q: int, quad_degree: int | None = None) -> np.ndarray:
    """[v_{K,q,0,0}]^2 = ||v||_K^2 + (h_K/q)^2 ||curl v||_K^2 per element (s = t = 0)."""
    deg = default_quad_degree(q) if quad_degree is None else quad_degree
    out = np.zeros(mesh.n_tets)
    for shape, els in shape_groups(mesh):
        t, w = shape.volume_rule(deg)
        a = sample(v, mesh, els, shape, t, "value")
        c = sample(v, mesh, els, shape, t, "curl")
        out[els] = np.einsum("gnc,gnc,n->g", a, a, w) + (mesh.h[els] / q) ** 2 * np.einsum("gnc,gnc,n->g", c, c, w)
    return out
