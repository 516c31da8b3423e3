from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from commuteproj.polyspace import (Element, LocalField, VectorPoly, curl_map, eval_curl, eval_div, eval_field,
                                   space_dimension)
from commuteproj.quadrature import QuadratureDegreeError, quadrature
from conftest import random_tet

REF = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)


def _monomials(x, deg):
    return [x[:, 0] ** a * x[:, 1] ** b * x[:, 2] ** c
            for a in range(deg + 1) for b in range(deg + 1 - a) for c in range(deg + 1 - a - b)]


def _gram_rank(family, q, rng):
    """Rank of the generating set of the space, sampled at random points."""
    x = rng.random((200, 3))
    gens = []
    P = _monomials(x, q)
    for m in P:
        for c in range(3):
            f = np.zeros((len(x), 3))
            f[:, c] = m
            gens.append(f)
    for m in P:
        if family == "ND":
            for c in range(3):
                e = np.zeros(3)
                e[c] = 1.0
                gens.append(np.cross(x, e) * m[:, None])
        else:
            gens.append(x * m[:, None])
    if family == "P":
        gens = P
    G = np.array([g.ravel() for g in gens])
    return np.linalg.matrix_rank(G @ G.T, tol=1e-9 * np.abs(G @ G.T).max())


def test_dimension_p1():
    assert space_dimension("P", 1) == 4


@pytest.mark.parametrize("family,q", [("ND", 0), ("RT", 0), ("ND", 1), ("RT", 1), ("ND", 2), ("RT", 2), ("P", 3)])
def test_dimension_matches_rank(family, q, rng):
    assert space_dimension(family, q) == _gram_rank(family, q, rng)


def test_dimension_values():
    assert (space_dimension("ND", 0), space_dimension("RT", 0)) == (6, 4)
    assert (space_dimension("ND", 1), space_dimension("RT", 1)) == (20, 15)


def test_lowest_order_rt_face_traces():
    el = Element.from_coords(REF)
    rt = el.space("RT", 0)
    faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
    for f in faces:
        P = REF[list(f)]
        n = np.cross(P[1] - P[0], P[2] - P[0])
        n /= np.linalg.norm(n)
        pts = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [1 / 3, 1 / 3, 1 / 3]]) @ P
        vals = np.einsum("knc,c->kn", rt.values(el.to_ref(pts)), n)
        # each face trace constant; only one function has a nonzero trace there
        assert np.allclose(vals, vals[:, :1], atol=1e-12)
        assert np.sum(np.abs(vals[:, 0]) > 1e-10) == 1


def test_lowest_order_nd_edge_traces():
    el = Element.from_coords(REF)
    nd = el.space("ND", 0)
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    for i, j in edges:
        t = REF[j] - REF[i]
        pts = REF[i] + np.array([0.1, 0.5, 0.9])[:, None] * t
        vals = np.einsum("knc,c->kn", nd.values(el.to_ref(pts)), t)
        assert np.allclose(vals, vals[:, :1], atol=1e-12)
        assert np.sum(np.abs(vals[:, 0]) > 1e-10) == 1


@pytest.mark.parametrize("family", ["ND", "RT", "P"])
def test_basis_count_and_independence(family, rng):
    el = Element.from_coords(random_tet(rng).tet_coords(0))
    for q in range(4):
        sp = el.space(family, q)
        M = sp.mass()
        assert M.shape == (space_dimension(family, q),) * 2
        assert np.all(np.linalg.eigvalsh(M) > 0)


class _Linear:
    degree = 1

    def __init__(self, A):
        self.A = np.asarray(A, float)

    def __call__(self, x):
        return np.atleast_2d(x) @ self.A.T


def test_curl_of_rotation():
    from commuteproj.interp import canonical_nd
    el = Element.from_coords(REF)
    f = canonical_nd(_Linear([[0, -1, 0], [1, 0, 0], [0, 0, 0]]), el, 0)
    pts = np.random.default_rng(0).dirichlet(np.ones(4), 5) @ REF
    assert np.allclose(eval_field(f, pts), np.stack([-pts[:, 1], pts[:, 0], 0 * pts[:, 0]], axis=1), atol=1e-13)
    assert np.allclose(eval_curl(f, pts), [0, 0, 2], atol=1e-13)


def test_div_of_position():
    from commuteproj.interp import canonical_rt
    el = Element.from_coords(REF)
    f = canonical_rt(_Linear(np.eye(3)), el, 0)
    pts = np.random.default_rng(1).dirichlet(np.ones(4), 5) @ REF
    assert np.allclose(eval_field(f, pts), pts, atol=1e-13)
    assert np.allclose(eval_div(f, pts), 3.0)


@settings(max_examples=20, deadline=None)
@given(q=st.integers(0, 3), seed=st.integers(0, 2 ** 31))
def test_div_curl_vanishes(q, seed):
    rng = np.random.default_rng(seed)
    el = Element.from_coords(random_tet(rng).tet_coords(0))
    nd, rt = el.space("ND", q), el.space("RT", q)
    c = rng.standard_normal(nd.dim)
    C = curl_map(nd, rt)
    pts = rng.dirichlet(np.ones(4), 6) @ el.vertices
    # curl of the ND field reproduced exactly by the RT field C c, which has zero divergence
    assert np.allclose(np.tensordot(C @ c, rt.values(el.to_ref(pts)), axes=(0, 0)),
                       eval_curl(LocalField(el, nd, c), pts), atol=1e-9 * np.abs(c).max())
    assert np.allclose(np.tensordot(C @ c, rt.divs(el.to_ref(pts)), axes=(0, 0)), 0.0, atol=1e-8)


def _divfree_dim(rt, q):
    from commuteproj.interp import div_matrix
    from scipy.linalg import null_space
    return null_space(div_matrix(rt.shape, q)).shape[1]


@pytest.mark.parametrize("q", [0, 1, 2])
def test_curl_map_rank(q):
    el = Element.from_coords(REF)
    nd, rt = el.space("ND", q), el.space("RT", q)
    C = curl_map(nd, rt)
    r = np.linalg.matrix_rank(C, tol=1e-9)
    assert r == _divfree_dim(rt, q)
    # kernel of curl is the gradients of P_{q+1}
    assert nd.dim - r == space_dimension("P", q + 1) - 1
    if q == 0:
        assert r == 3


# -- quadrature ---------------------------------------------------------------

def test_quadrature_volume_and_first_moment():
    r = quadrature(3, 1)
    assert np.isclose(r.weights.sum(), 1 / 6, rtol=1e-15)
    assert np.isclose(r.weights @ r.points[:, 0], 1 / 24, rtol=1e-14)


def _simplex_monomial(a, b, c):
    return factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def test_quadrature_sextic():
    for d in (6, 7, 10):
        r = quadrature(3, d)
        x = r.points
        val = r.weights @ (x[:, 0] ** 2 * x[:, 1] ** 2 * x[:, 2] ** 2)
        assert abs(val / _simplex_monomial(2, 2, 2) - 1) < 1e-14


@pytest.mark.parametrize("d", [0, 3, 8, 15, 30])
def test_quadrature_exactness_all_monomials(d):
    r = quadrature(3, d)
    x = r.points
    for a in range(d + 1):
        for b in range(d + 1 - a):
            for c in range(d + 1 - a - b):
                val = r.weights @ (x[:, 0] ** a * x[:, 1] ** b * x[:, 2] ** c)
                assert abs(val / _simplex_monomial(a, b, c) - 1) < 1e-13


def test_triangle_and_segment_rules():
    r = quadrature(2, 5)
    assert np.isclose(r.weights @ (r.points[:, 0] ** 2 * r.points[:, 1] ** 3), 2 * 6 / factorial(7))
    s = quadrature(1, 9)
    assert np.isclose(s.weights @ s.points[:, 0] ** 9, 0.1)


def test_quadrature_degree_limit():
    with pytest.raises(QuadratureDegreeError):
        quadrature(3, 500)


def test_vector_poly_curl_poly(rng):
    v = VectorPoly.random(3, rng)
    x = rng.random((7, 3))
    assert np.allclose(v.curl_poly()(x), v.curl(x))
