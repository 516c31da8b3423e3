"""Elementwise L2 projectors and canonical RT / ND interpolators.

Besides the user-facing operations (:func:`l2_project`, :func:`canonical_rt`,
:func:`canonical_nd`) this module holds the per-shape matrices that the
projector pipelines reuse: divergence tests against ``P_q``, the action of the
canonical interpolators on products ``lambda_i * phi`` with a barycentric
coordinate, degree reduction ``RT_{q+1} -> RT_q`` and constant moments.
All of them are translation invariant and are cached on the :class:`Shape`.
"""

from __future__ import annotations

import numpy as np

from .polyspace import Element, LocalField, LocalSpace, Shape, eval_ortho_tet

QUAD_CHECK_TOL = 1e-10


class NonPolynomialInput(ValueError):
    pass


def _call(target, x):
    fn = target.value if hasattr(target, "value") else target
    return np.asarray(fn(x), dtype=float)


def project_values(shape: Shape, family: str, q: int, t, w, values) -> np.ndarray:
    """L2 projection coefficients from values sampled at rule points.

    ``values`` has shape (..., npts) for P or (..., npts, 3) for vector families.
    """
    sp = shape.space(family, q)
    V = sp.values(t)
    if family == "P":
        load = np.einsum("...n,kn,n->...k", values, V, w)
    else:
        load = np.einsum("...nc,knc,n->...k", values, V, w)
    if family in ("P", "Pvec"):
        return load / shape.volume  # orthonormal in the normalised product
    return np.linalg.solve(sp.mass(), load.T).T


def l2_project(target, element: Element, family: str, q: int, degree: int | None = None,
               check: bool = False) -> LocalField:
    """Elementwise L2-orthogonal projection onto P_q, [P_q]^3 or RT_q."""
    if family not in ("P", "Pvec", "RT", "ND"):
        raise ValueError(f"unsupported family {family!r}")
    if degree is None:
        deg_in = getattr(target, "degree", None)
        degree = q + (deg_in if deg_in is not None else q + 6) + 1
    t, w = element.shape.volume_rule(degree)
    vals = _call(target, element.to_phys(t))
    c = project_values(element.shape, family, q, t, w, vals)
    if check:
        t2, w2 = element.shape.volume_rule(degree + 2)
        c2 = project_values(element.shape, family, q, t2, w2, _call(target, element.to_phys(t2)))
        if np.linalg.norm(c2 - c) > QUAD_CHECK_TOL * max(np.linalg.norm(c), 1e-300):
            raise RuntimeWarning("quadrature degree looks insufficient for this target")
    return LocalField(element, element.space(family, q), c)


def _poly_degree(field) -> int:
    deg = getattr(field, "degree", None)
    if deg is None and isinstance(field, LocalField):
        deg = field.space.frame_degree
    if deg is None:
        raise NonPolynomialInput("canonical interpolation needs a polynomial input with known degree")
    return int(deg)


def canonical(field, element: Element, family: str, q: int) -> LocalField:
    deg = _poly_degree(field)
    ds = element.shape.dofset(family, q, deg)
    vals = _call(field, element.to_phys(ds.points))
    return LocalField(element, element.space(family, q), ds.apply(vals))


def canonical_rt(field, element: Element, q: int) -> LocalField:
    """Canonical RT_q interpolant (face normal moments and interior moments)."""
    return canonical(field, element, "RT", q)


def canonical_nd(field, element: Element, q: int) -> LocalField:
    """Canonical ND_q interpolant (edge, face tangential and interior moments)."""
    return canonical(field, element, "ND", q)


# ---------------------------------------------------------------------------
# cached per-shape matrices

def _cached(shape: Shape, key, build):
    c = shape.cache
    if key not in c:
        c[key] = build()
    return c[key]


def div_matrix(shape: Shape, q: int, ptest: int | None = None) -> np.ndarray:
    """Coefficients of div(phi_j) in the orthonormal P_ptest basis: (dim P, dim RT_q)."""
    ptest = q if ptest is None else ptest

    def build():
        t, w = shape.volume_rule(q + ptest + 1)
        R = eval_ortho_tet(t, ptest)
        Dv = shape.space("RT", q).divs(t)
        return (R * w) @ Dv.T / shape.volume
    return _cached(shape, ("div", q, ptest), build)


def p_projection(shape: Shape, q: int, t, w, values) -> np.ndarray:
    """Orthonormal P_q coefficients of the L2 projection of sampled scalar values."""
    R = eval_ortho_tet(t, q)
    return np.einsum("...n,kn,n->...k", values, R, w) / shape.volume


def product_interp(shape: Shape, family: str, q: int, i: int, qin: int | None = None) -> np.ndarray:
    """Matrix of phi -> I^{family,q}(lambda_i phi) for phi in family_{qin} (qin defaults to q)."""
    qin = q if qin is None else qin

    def build():
        sp = shape.space(family, qin)
        ds = shape.dofset(family, q, sp.frame_degree + 1)
        lam = shape.lambdas(ds.points)[:, i]
        V = sp.values(ds.points) * lam[None, :, None]
        return ds.apply(V).T
    return _cached(shape, ("lam_interp", family, q, i, qin), build)


def rt_reduce(shape: Shape, q: int) -> np.ndarray:
    """Matrix of the canonical RT_q interpolation of RT_{q+1} fields."""
    def build():
        sp = shape.space("RT", q + 1)
        ds = shape.dofset("RT", q, sp.frame_degree)
        return ds.apply(sp.values(ds.points)).T
    return _cached(shape, ("rt_reduce", q), build)


def constant_moments(shape: Shape, family: str, q: int) -> np.ndarray:
    """(1/|K|) int phi_j e_c : shape (3, dim)."""
    def build():
        sp = shape.space(family, q)
        t, w = shape.volume_rule(sp.frame_degree)
        return np.einsum("knc,n->ck", sp.values(t), w) / shape.volume
    return _cached(shape, ("const_mom", family, q), build)


def cross_terms(shape: Shape, p: int, i: int, q_rt: int) -> tuple[np.ndarray, np.ndarray]:
    """Loads of grad(lambda_i) x iota for iota in ND_p.

    Returns ``(X, Q)`` with ``X[j, m] = int phi^RT_j . (g x phi^ND_m)`` for
    ``phi^RT in RT_{q_rt}`` and ``Q[c, m] = (1/|K|) int (g x phi^ND_m)_c``.
    """
    def build():
        nd = shape.space("ND", p)
        rt = shape.space("RT", q_rt)
        t, w = shape.volume_rule(nd.frame_degree + rt.frame_degree)
        g = shape.grad_lambda[i]
        Vn = np.cross(g[None, None, :], nd.values(t))
        X = np.einsum("jnc,mnc,n->jm", rt.values(t), Vn, w)
        Q = np.einsum("mnc,n->cm", Vn, w) / shape.volume
        return X, Q
    return _cached(shape, ("cross", p, i, q_rt), build)


def product_load(shape: Shape, family_out: str, q_out: int, family_in: str, q_in: int, i: int) -> np.ndarray:
    """``L[j, m] = int phi^out_j . (lambda_i phi^in_m)``."""
    def build():
        a = shape.space(family_out, q_out)
        b = shape.space(family_in, q_in)
        t, w = shape.volume_rule(a.frame_degree + b.frame_degree + 1)
        lam = shape.lambdas(t)[:, i]
        return np.einsum("jnc,mnc,n->jm", a.values(t), b.values(t), w * lam)
    return _cached(shape, ("prod_load", family_out, q_out, family_in, q_in, i), build)


def cross_mass(shape: Shape, fa: str, qa: int, fb: str, qb: int) -> np.ndarray:
    """``int phi^a_j . phi^b_m`` between two local spaces."""
    def build():
        a = shape.space(fa, qa)
        b = shape.space(fb, qb)
        t, w = shape.volume_rule(a.frame_degree + b.frame_degree)
        return np.einsum("jnc,mnc,n->jm", a.values(t), b.values(t), w)
    return _cached(shape, ("xmass", fa, qa, fb, qb), build)


def curl_mass(shape: Shape, q: int) -> np.ndarray:
    """``int curl phi_j . curl phi_m`` on ND_q."""
    def build():
        nd = shape.space("ND", q)
        t, w = shape.volume_rule(2 * q)
        C = nd.curls(t)
        return np.einsum("jnc,mnc,n->jm", C, C, w)
    return _cached(shape, ("curl_mass", q), build)


__all__ = [
    "l2_project", "canonical_rt", "canonical_nd", "canonical", "div_matrix", "p_projection",
    "product_interp", "rt_reduce", "constant_moments", "cross_terms", "product_load",
    "cross_mass", "curl_mass", "project_values", "NonPolynomialInput", "LocalSpace",
]
