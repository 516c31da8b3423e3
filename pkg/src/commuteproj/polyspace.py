"""Local polynomial spaces P_q, [P_q]^3, ND_q and RT_q on a tetrahedron.

Every element is described by an affine map ``x = centroid + J t`` where ``t``
ranges over the reference tetrahedron shifted to have its centroid at the
origin.  Polynomials are stored as coefficient arrays over the monomials of
``t``; vector fields use physical (x, y, z) components.  Because the map is
affine, ``P_q(K)`` is exactly the polynomials of degree ``q`` in ``t``, and
the Nedelec / Raviart-Thomas generating sets are written with ``J t`` in place
of ``x`` (the translation part is absorbed in the lower-order term).

Nedelec and Raviart-Thomas bases are dual to moment functionals built on the
sorted global vertex order (see :class:`DofSet`), which makes the local
degrees of freedom of neighbouring elements agree on shared edges and faces.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .mesh import LOCAL_EDGES, LOCAL_FACES
from .quadrature import quadrature

FAMILIES = ("P", "Pvec", "ND", "RT")
REF_VERTICES = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
REF_CENTROID = np.full(3, 0.25)


class BasisError(RuntimeError):
    pass


def space_dimension(family: str, q: int) -> int:
    if q < 0:
        raise ValueError("degree must be non-negative")
    if family == "P":
        return (q + 1) * (q + 2) * (q + 3) // 6
    if family == "Pvec":
        return 3 * space_dimension("P", q)
    if family == "ND":
        return (q + 1) * (q + 3) * (q + 4) // 2
    if family == "RT":
        return (q + 1) * (q + 2) * (q + 4) // 2
    raise ValueError(f"unsupported family {family!r}")


# ---------------------------------------------------------------------------
# monomials

@lru_cache(maxsize=None)
def exponents(deg: int, dim: int = 3) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples of total degree <= deg, graded order."""
    out = []
    for d in range(deg + 1):
        if dim == 2:
            out += [(d - j, j) for j in range(d + 1)]
        else:
            for i in range(d, -1, -1):
                for j in range(d - i, -1, -1):
                    out.append((i, j, d - i - j))
    return tuple(out)


@lru_cache(maxsize=None)
def exponent_index(deg: int, dim: int = 3) -> dict:
    return {e: i for i, e in enumerate(exponents(deg, dim))}


def n_monomials(deg: int, dim: int = 3) -> int:
    return len(exponents(deg, dim)) if deg >= 0 else 0


def _powers(t, deg):
    t = np.asarray(t, dtype=float)
    pw = np.ones((deg + 1,) + t.shape)
    for d in range(1, deg + 1):
        pw[d] = pw[d - 1] * t
    return pw


def monomials(t, deg: int) -> np.ndarray:
    """Values of all monomials of degree <= deg at points t (n, dim): shape (nm, n)."""
    t = np.atleast_2d(t)
    dim = t.shape[1]
    pw = _powers(t, deg)
    E = np.array(exponents(deg, dim))
    out = np.ones((len(E), len(t)))
    for c in range(dim):
        out *= pw[E[:, c], :, c]
    return out


def monomial_grads(t, deg: int) -> np.ndarray:
    """d/dt_c of every monomial: shape (dim, nm, n)."""
    t = np.atleast_2d(t)
    dim = t.shape[1]
    pw = _powers(t, deg)
    E = np.array(exponents(deg, dim))
    out = np.empty((dim, len(E), len(t)))
    for c in range(dim):
        g = E[:, c][:, None] * pw[np.maximum(E[:, c] - 1, 0), :, c]
        for o in range(dim):
            if o != c:
                g = g * pw[E[:, o], :, o]
        out[c] = g
    return out


def _orthonormal_coeffs(points, weights, deg, dim):
    V = monomials(points, deg)
    G = (V * weights) @ V.T
    L = np.linalg.cholesky(G)
    return np.linalg.inv(L)  # rows: orthonormal polynomials in the monomial frame


@lru_cache(maxsize=None)
def ortho_tet(deg: int) -> np.ndarray:
    """Coefficients (n, nm) of polynomials in t orthonormal on the reference tet (normalised measure)."""
    rule = quadrature(3, 2 * deg)
    return _orthonormal_coeffs(rule.points - REF_CENTROID, rule.weights * 6.0, deg, 3)


@lru_cache(maxsize=None)
def ortho_tri(deg: int) -> np.ndarray:
    """Orthonormal polynomials in (l1 - 1/3, l2 - 1/3) on the reference triangle (normalised)."""
    rule = quadrature(2, 2 * deg)
    return _orthonormal_coeffs(rule.points - 1.0 / 3.0, rule.weights * 2.0, deg, 2)


def eval_ortho_tri(lam12, deg):
    return ortho_tri(deg) @ monomials(np.asarray(lam12) - 1.0 / 3.0, deg)


def eval_ortho_tet(t, deg):
    return ortho_tet(deg) @ monomials(t, deg)


def legendre01(s, deg):
    """Orthonormal Legendre polynomials on [0, 1] (normalised measure): (deg+1, n)."""
    x = 2.0 * np.asarray(s, dtype=float).ravel() - 1.0
    out = np.empty((deg + 1, len(x)))
    out[0] = 1.0
    if deg >= 1:
        out[1] = x
    for k in range(1, deg):
        out[k + 1] = ((2 * k + 1) * x * out[k] - k * out[k - 1]) / (k + 1)
    return out * np.sqrt(2 * np.arange(deg + 1) + 1)[:, None]


# ---------------------------------------------------------------------------
# element geometry

class Shape:
    """Translation-free part of an element: Jacobian plus all cached local spaces."""

    def __init__(self, J: np.ndarray):
        self.J = np.array(J, dtype=float)
        self.Jinv = np.linalg.inv(self.J)
        self.detJ = float(np.linalg.det(self.J))
        self.volume = abs(self.detJ) / 6.0
        X = np.vstack([np.zeros(3), self.J.T])
        self.vertex_offsets = X  # vertex coordinates relative to the first one
        self.h = max(np.linalg.norm(X[i] - X[j]) for i, j in LOCAL_EDGES)
        self.Jhat = self.J / self.h
        self._spaces: dict = {}
        self._dofsets: dict = {}
        self.cache: dict = {}

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """Gradients of the four barycentric coordinates, shape (4, 3)."""
        return np.vstack([-self.Jinv.sum(axis=0), self.Jinv])

    def lambdas(self, t) -> np.ndarray:
        s = np.atleast_2d(t) + REF_CENTROID
        return np.hstack([1.0 - s.sum(axis=1, keepdims=True), s])

    @cached_property
    def edge_tangents(self):
        X = self.vertex_offsets
        out = np.array([X[j] - X[i] for i, j in LOCAL_EDGES])
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    @cached_property
    def face_frames(self):
        """Per local face: unit normal of the sorted triple and two unit in-face tangents."""
        X = self.vertex_offsets
        nrm, t1, t2 = [], [], []
        for i, j, k in LOCAL_FACES:
            a, b = X[j] - X[i], X[k] - X[i]
            n = np.cross(a, b)
            nrm.append(n / np.linalg.norm(n))
            t1.append(a / np.linalg.norm(a))
            t2.append(b / np.linalg.norm(b))
        return np.array(nrm), np.array(t1), np.array(t2)

    def space(self, family: str, q: int) -> "LocalSpace":
        key = (family, q)
        if key not in self._spaces:
            self._spaces[key] = LocalSpace(self, family, q)
        return self._spaces[key]

    def dofset(self, family: str, q: int, degree: int) -> "DofSet":
        key = (family, q, degree)
        if key not in self._dofsets:
            self._dofsets[key] = DofSet(self, family, q, degree)
        return self._dofsets[key]

    def volume_rule(self, degree: int):
        """Reference points (in t) and physical weights of a volume rule."""
        rule = quadrature(3, degree)
        return rule.points - REF_CENTROID, rule.weights * abs(self.detJ)


_SHAPES: dict = {}


def get_shape(J: np.ndarray) -> Shape:
    key = tuple(np.round(np.asarray(J, dtype=float).ravel(), 12).tolist())
    sh = _SHAPES.get(key)
    if sh is None:
        if len(_SHAPES) > 20000:
            _SHAPES.clear()
        sh = _SHAPES[key] = Shape(J)
    return sh


@dataclass(frozen=True)
class Element:
    """An element of a mesh: index, sorted vertex coordinates, cached shape."""

    index: int
    vertices: np.ndarray  # (4, 3), sorted global ids
    shape: Shape

    @classmethod
    def from_coords(cls, X4, index: int = -1) -> "Element":
        X4 = np.asarray(X4, dtype=float)
        return cls(index, X4, get_shape((X4[1:] - X4[0]).T))

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def to_ref(self, x) -> np.ndarray:
        return (np.atleast_2d(x) - self.centroid) @ self.shape.Jinv.T

    def to_phys(self, t) -> np.ndarray:
        return self.centroid + np.atleast_2d(t) @ self.shape.J.T

    def space(self, family, q):
        return self.shape.space(family, q)

    @property
    def volume(self):
        return self.shape.volume

    @property
    def h(self):
        return self.shape.h


def mesh_elements(mesh) -> list[Element]:
    cached = getattr(mesh, "_elements", None)
    if cached is None:
        cached = [Element.from_coords(mesh.tet_coords(k), k) for k in range(mesh.n_tets)]
        mesh._elements = cached
    return cached


# ---------------------------------------------------------------------------
# degrees of freedom

class DofSet:
    """Moment functionals of ND_q / RT_q, evaluated from values at fixed reference points.

    ``points`` (t coordinates, shape (N, 3)) and ``weights`` (ndof, N, 3) satisfy
    ``dofs = einsum('dnc,nc->d', weights, values)``.  Moment rules are exact for
    inputs of polynomial degree <= ``degree``.

    Functionals (all averaged over their entity):
      RT: face   (v . n_F) r,  r in P_q(F);   interior v_c r, r in P_{q-1}(K)
      ND: edge   (v . t_e) r,  r in P_q(e);   face (v . t_{F,j}) r, r in P_{q-1}(F), j = 1, 2;
          interior v_c r, r in P_{q-2}(K)
    ``n_F``, ``t_e``, ``t_{F,j}`` and the test polynomials follow the sorted
    vertex order, hence are shared by the two elements adjacent to a face.
    """

    def __init__(self, shape: Shape, family: str, q: int, degree: int):
        if family not in ("ND", "RT"):
            raise ValueError("degrees of freedom only for ND and RT")
        self.family, self.q, self.degree = family, q, degree
        pts, rows = [], []
        nrm, ft1, ft2 = shape.face_frames
        offset = 0
        layout = []  # (entity kind, local entity, count)

        def add(points_t, block):  # block: (ndof_here, npts, 3)
            nonlocal offset
            pts.append(points_t)
            rows.append((offset, block))
            offset += len(points_t)

        ndof_tot = 0
        if family == "ND":
            rule = quadrature(1, degree + q)
            s = rule.points[:, 0]
            L = legendre01(s, q)
            for e, (i, j) in enumerate(LOCAL_EDGES):
                sh = REF_VERTICES[i] + np.outer(s, REF_VERTICES[j] - REF_VERTICES[i])
                blk = (L * rule.weights)[:, :, None] * shape.edge_tangents[e][None, None, :]
                add(sh - REF_CENTROID, blk)
                layout.append(("edge", e, q + 1))
                ndof_tot += q + 1
        if (family == "ND" and q >= 1) or family == "RT":
            fq = q - 1 if family == "ND" else q
            rule = quadrature(2, degree + fq)
            R = eval_ortho_tri(rule.points, fq) * (rule.weights * 2.0)
            for f, (i, j, k) in enumerate(LOCAL_FACES):
                sh = (REF_VERTICES[i] + np.outer(rule.points[:, 0], REF_VERTICES[j] - REF_VERTICES[i])
                      + np.outer(rule.points[:, 1], REF_VERTICES[k] - REF_VERTICES[i]))
                if family == "RT":
                    blk = R[:, :, None] * nrm[f][None, None, :]
                else:
                    blk = np.empty((2 * len(R), len(rule.weights), 3))
                    blk[0::2] = R[:, :, None] * ft1[f][None, None, :]
                    blk[1::2] = R[:, :, None] * ft2[f][None, None, :]
                add(sh - REF_CENTROID, blk)
                layout.append(("face", f, len(blk)))
                ndof_tot += len(blk)
        vq = q - 2 if family == "ND" else q - 1
        if vq >= 0:
            rule = quadrature(3, degree + vq)
            t = rule.points - REF_CENTROID
            R = eval_ortho_tet(t, vq) * (rule.weights * 6.0)
            blk = np.zeros((3 * len(R), len(t), 3))
            for c in range(3):
                blk[c::3, :, c] = R
            add(t, blk)
            layout.append(("interior", 0, len(blk)))
            ndof_tot += len(blk)

        self.points = np.vstack(pts)
        self.weights = np.zeros((ndof_tot, len(self.points), 3))
        r = 0
        for off, blk in rows:
            self.weights[r:r + len(blk), off:off + blk.shape[1]] = blk
            r += len(blk)
        self.layout = layout
        self.ndof = ndof_tot

    def apply(self, values: np.ndarray) -> np.ndarray:
        """values (..., N, 3) -> dofs (..., ndof)."""
        return np.einsum("dnc,...nc->...d", self.weights, values)


# ---------------------------------------------------------------------------
# local spaces

class LocalSpace:
    """Basis of one local polynomial space on a :class:`Shape`.

    For ``ND``/``RT`` the basis is dual to :class:`DofSet` (coefficients of a
    field in this basis are its degrees of freedom).  ``P`` is orthonormal
    w.r.t. the element-normalised L2 product; ``Pvec`` stacks ``P`` per component.
    """

    def __init__(self, shape: Shape, family: str, q: int):
        if family not in FAMILIES:
            raise ValueError(f"unsupported family {family!r}")
        if q < 0:
            raise ValueError("degree must be non-negative")
        self.shape, self.family, self.q = shape, family, q
        self.dim = space_dimension(family, q)
        if family == "P":
            self.frame_degree = q
            self.coeffs = ortho_tet(q).copy()
        elif family == "Pvec":
            self.frame_degree = q
            C = ortho_tet(q)
            n = len(C)
            self.coeffs = np.zeros((3 * n, 3, C.shape[1]))
            for c in range(3):
                self.coeffs[c * n:(c + 1) * n, c, :] = C
        else:
            self.frame_degree = q + 1
            span = self._spanning_set()
            flat = span.reshape(len(span), -1)
            _, sv, Vt = np.linalg.svd(flat, full_matrices=False)
            rank = int(np.sum(sv > 1e-10 * sv[0]))
            if rank != self.dim:
                raise BasisError(f"{family}_{q}: spanning set rank {rank} != {self.dim}")
            frame = Vt[:rank].reshape(rank, 3, -1)
            ds = shape.dofset(family, q, q + 1)
            D = ds.apply(self._tab(frame, ds.points))  # (nframe, ndof)
            self.dof_matrix_cond = float(np.linalg.cond(D))
            self.coeffs = np.einsum("jk,kcm->jcm", np.linalg.inv(D), frame)
            self.layout = ds.layout

    @property
    def is_vector(self):
        return self.family != "P"

    def _spanning_set(self):
        q, Jh = self.q, self.shape.Jhat
        idx = exponent_index(q + 1)
        nm = n_monomials(q + 1)
        out = []
        for c in range(3):
            for a in exponents(q):
                f = np.zeros((3, nm))
                f[c, idx[a]] = 1.0
                out.append(f)
        top = [a for a in exponents(q) if sum(a) == q]
        for a in top:
            if self.family == "ND":
                for c in range(3):
                    f = np.zeros((3, nm))
                    ec = np.eye(3)[c]
                    for e in range(3):
                        ae = list(a)
                        ae[e] += 1
                        f[:, idx[tuple(ae)]] += np.cross(Jh[:, e], ec)
                    out.append(f)
            else:
                f = np.zeros((3, nm))
                for e in range(3):
                    ae = list(a)
                    ae[e] += 1
                    f[:, idx[tuple(ae)]] += Jh[:, e]
                out.append(f)
        return np.array(out)

    def _tab(self, coeffs, t):
        V = monomials(t, self.frame_degree)
        if coeffs.ndim == 2:
            return coeffs @ V
        return np.einsum("kcm,mn->knc", coeffs, V)

    # -- tabulation on reference points t ---------------------------------
    def values(self, t) -> np.ndarray:
        """(n, npts, 3) for vector spaces, (n, npts) for P."""
        return self._tab(self.coeffs, t)

    def _jacobian(self, t):
        """Physical Jacobian dv_c/dx_d of each basis function: (n, npts, 3, 3)."""
        G = monomial_grads(t, self.frame_degree)  # (3[t], nm, npts)
        dt = np.einsum("kcm,emn->knce", self.coeffs, G)
        return dt @ self.shape.Jinv

    def grads(self, t) -> np.ndarray:
        if self.family != "P":
            raise ValueError("grads only for scalar P")
        G = monomial_grads(t, self.frame_degree)
        return np.einsum("km,emn->kne", self.coeffs, G) @ self.shape.Jinv

    def curls(self, t) -> np.ndarray:
        if self.family not in ("ND", "Pvec"):
            raise ValueError(f"curl is not defined for family {self.family}")
        D = self._jacobian(t)
        return np.stack([D[..., 2, 1] - D[..., 1, 2],
                         D[..., 0, 2] - D[..., 2, 0],
                         D[..., 1, 0] - D[..., 0, 1]], axis=-1)

    def divs(self, t) -> np.ndarray:
        if self.family not in ("RT", "Pvec"):
            raise ValueError(f"div is not defined for family {self.family}")
        D = self._jacobian(t)
        return D[..., 0, 0] + D[..., 1, 1] + D[..., 2, 2]

    # -- cached element matrices ------------------------------------------
    def mass(self) -> np.ndarray:
        key = ("mass", self.family, self.q)
        c = self.shape.cache
        if key not in c:
            t, w = self.shape.volume_rule(2 * self.frame_degree)
            V = self.values(t)
            c[key] = np.einsum("inc,jnc,n->ij", V, V, w) if V.ndim == 3 else (V * w) @ V.T
            c[key] = 0.5 * (c[key] + c[key].T)
        return c[key]


@dataclass
class LocalField:
    """Coefficient vector in a :class:`LocalSpace` on a concrete element."""

    element: Element
    space: LocalSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.dim,):
            raise ValueError("coefficient length does not match the basis")

    def __call__(self, x):
        return eval_field(self, x)

    def curl(self, x):
        return eval_curl(self, x)

    def div(self, x):
        return eval_div(self, x)


def build_basis(element: Element, family: str, q: int) -> LocalSpace:
    return element.shape.space(family, q)


def eval_field(field: LocalField, points) -> np.ndarray:
    t = field.element.to_ref(points)
    V = field.space.values(t)
    return np.tensordot(field.coeffs, V, axes=(0, 0))


def eval_curl(field: LocalField, points) -> np.ndarray:
    t = field.element.to_ref(points)
    return np.tensordot(field.coeffs, field.space.curls(t), axes=(0, 0))


def eval_div(field: LocalField, points) -> np.ndarray:
    t = field.element.to_ref(points)
    return np.tensordot(field.coeffs, field.space.divs(t), axes=(0, 0))


def curl_map(nd: LocalSpace, rt: LocalSpace) -> np.ndarray:
    """Matrix C with curl(sum c_j nd_j) = sum (C c)_i rt_i (exact: curl ND_p is in RT_p)."""
    if nd.family != "ND" or rt.family != "RT" or nd.shape is not rt.shape:
        raise ValueError("curl_map needs ND and RT spaces on the same element")
    key = ("curl_map", nd.q, rt.q)
    c = nd.shape.cache
    if key not in c:
        ds = nd.shape.dofset("RT", rt.q, nd.q + 1)
        c[key] = ds.apply(nd.curls(ds.points)).T
    return c[key]


# ---------------------------------------------------------------------------
# polynomial input fields in physical coordinates

class VectorPoly:
    """Vector polynomial ``sum_a c[:, a] (x - center)^a`` (physical coordinates)."""

    def __init__(self, coeffs, degree: int, center=(0.0, 0.0, 0.0)):
        self.coeffs = np.asarray(coeffs, dtype=float).reshape(3, n_monomials(degree))
        self.degree = degree
        self.center = np.asarray(center, dtype=float)

    @classmethod
    def random(cls, degree: int, rng, center=(0.0, 0.0, 0.0), scale=1.0):
        return cls(rng.standard_normal((3, n_monomials(degree))) * scale, degree, center)

    def __call__(self, x, cells=None):
        V = monomials(np.atleast_2d(x) - self.center, self.degree)
        return (self.coeffs @ V).T

    def jacobian(self, x):
        G = monomial_grads(np.atleast_2d(x) - self.center, self.degree)
        return np.einsum("cm,dmn->ncd", self.coeffs, G)

    def curl(self, x, cells=None):
        D = self.jacobian(x)
        return np.stack([D[:, 2, 1] - D[:, 1, 2], D[:, 0, 2] - D[:, 2, 0], D[:, 1, 0] - D[:, 0, 1]], axis=1)

    def div(self, x, cells=None):
        D = self.jacobian(x)
        return D[:, 0, 0] + D[:, 1, 1] + D[:, 2, 2]

    def curl_poly(self) -> "VectorPoly":
        d = max(self.degree - 1, 0)
        idx = exponent_index(d)
        out = np.zeros((3, n_monomials(d)))

        def deriv(comp, axis):
            res = np.zeros(n_monomials(d))
            for m, a in enumerate(exponents(self.degree)):
                if a[axis] == 0:
                    continue
                b = list(a)
                b[axis] -= 1
                res[idx[tuple(b)]] += a[axis] * self.coeffs[comp, m]
            return res

        out[0] = deriv(2, 1) - deriv(1, 2)
        out[1] = deriv(0, 2) - deriv(2, 0)
        out[2] = deriv(1, 0) - deriv(0, 1)
        return VectorPoly(out, d, self.center)


def shape_groups(mesh) -> list[tuple[Shape, np.ndarray]]:
    """Elements grouped by shared :class:`Shape` (same Jacobian up to rounding)."""
    cached = getattr(mesh, "_shape_groups", None)
    if cached is None:
        groups: dict = {}
        for el in mesh_elements(mesh):
            groups.setdefault(id(el.shape), (el.shape, []))[1].append(el.index)
        cached = [(sh, np.array(ix)) for sh, ix in groups.values()]
        mesh._shape_groups = cached
    return cached


def centroids(mesh) -> np.ndarray:
    cached = getattr(mesh, "_centroids", None)
    if cached is None:
        cached = mesh.vertices[mesh.tets_sorted].mean(axis=1)
        mesh._centroids = cached
    return cached
