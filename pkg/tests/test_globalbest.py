import numpy as np
import pytest
import scipy.sparse as sp

from commuteproj.cls import InfeasibleConstraints
from commuteproj.dofmap import global_dofmap
from commuteproj.fields import AnalyticField, BrokenField, CurlView, face_jumps, make_field
from commuteproj.globalbest import (ConformingSystem, assemble_matrix, equivalence_report, global_constrained_best,
                                    global_unconstrained_best, localbest_sum, localbest_terms, mixed_pi_div,
                                    solve_spd, three_field_mixed)
from commuteproj.interp import div_matrix, l2_project
from commuteproj.mesh import generate
from commuteproj.polyspace import mesh_elements


def _discrete(mesh, family, p, rng):
    dm = global_dofmap(mesh, family, p)
    return BrokenField(mesh, family, p, dm.gather(rng.standard_normal(dm.n_dofs)))


def _euler_count(mesh, family, p):
    """Entity counting for the unconstrained conforming space."""
    from commuteproj.polyspace import space_dimension
    if family == "ND":
        per_edge, per_face = p + 1, (p * (p + 1) if p >= 1 else 0)
        per_cell = space_dimension("ND", p) - 6 * per_edge - 4 * per_face
        return mesh.n_edges * per_edge + mesh.n_faces * per_face + mesh.n_tets * per_cell
    per_face = (p + 1) * (p + 2) // 2
    per_cell = space_dimension("RT", p) - 4 * per_face
    return mesh.n_faces * per_face + mesh.n_tets * per_cell


@pytest.mark.parametrize("family", ["ND", "RT"])
@pytest.mark.parametrize("p", [0, 1, 2])
def test_dof_count_and_rank(family, p, cube, rng):
    sys_ = ConformingSystem(cube, family, p, bc=False)
    assert sys_.n == _euler_count(cube, family, p)
    # rank oracle: the gathered broken fields of random global vectors span a space of that dimension
    X = np.array([sys_.dofmap.gather(x).ravel() for x in np.eye(sys_.n)])
    assert np.linalg.matrix_rank(X) == sys_.n
    M = sys_.mass.toarray()
    assert np.allclose(M, M.T) and np.linalg.eigvalsh(M).min() > 0


@pytest.mark.parametrize("family,kind", [("ND", "tangential"), ("RT", "normal")])
def test_conformity_by_jumps(family, kind, rng):
    m = generate("cube-kuhn:refined=1:bc=mixed")
    for p in range(3):
        f = _discrete(m, family, p, rng)
        ji, jb = face_jumps(m, f, kind)
        scale = np.abs(f.coeffs).max()
        assert ji.max() <= 1e-10 * scale and jb.max() <= 1e-10 * scale


def test_broken_round_trip(cube1, rng):
    for fam in ("ND", "RT"):
        s = ConformingSystem(cube1, fam, 1)
        x = rng.standard_normal(s.n)
        assert np.allclose(s.from_broken(s.to_broken(x)), x)


def test_assemble_matrix_skips_removed():
    A = assemble_matrix(2, 2, [(np.array([[0, -1]]), np.array([[0, 1]]), np.ones((1, 2, 2)))])
    assert np.array_equal(A.toarray(), [[1, 1], [0, 0]])


def test_solve_spd_iterative_branch(rng):
    n = 6000
    A = sp.diags([np.full(n - 1, -0.3), np.full(n, 2.0) + rng.random(n), np.full(n - 1, -0.3)], [-1, 0, 1]).tocsr()
    b = rng.standard_normal(n)
    assert np.linalg.norm(A @ solve_spd(A, b) - b) <= 1e-12 * np.linalg.norm(b)


def test_unconstrained_reproduces_discrete(cube1, rng):
    v = _discrete(cube1, "ND", 1, rng)
    vh, m2 = global_unconstrained_best(cube1, v, 1)
    assert m2 < 1e-20 and np.allclose(vh.coeffs, v.coeffs)


def test_single_element_global_is_local(reftet):
    v = make_field("trig")
    vh, m2 = global_unconstrained_best(reftet, v, 1)
    # with no essential faces the global problem is the local weighted one; compare with a direct solve
    el = mesh_elements(reftet)[0]
    nd = el.space("ND", 1)
    from commuteproj.polyspace import curl_map
    t, w = el.shape.volume_rule(16)
    C = curl_map(nd, el.space("RT", 1))
    wt = (el.h / 2) ** 2
    A = nd.mass() + wt * C.T @ el.space("RT", 1).mass() @ C
    x = el.to_phys(t)
    b = np.einsum("nc,knc,n->k", v.value(x), nd.values(t), w) + wt * np.einsum("nc,knc,n->k", v.curl(x), nd.curls(t), w)
    assert np.allclose(vh.coeffs[0], np.linalg.solve(A, b))


@pytest.mark.parametrize("p", [0, 1])
def test_global_above_local(cube1, p):
    v = make_field("trig")
    _, m2 = global_unconstrained_best(cube1, v, p)
    lb, _ = localbest_sum(cube1, v, p)
    _, cons = global_constrained_best(cube1, v, p)
    assert m2 >= lb * (1 - 1e-9) and cons >= lb * (1 - 1e-9)


def test_constrained_discrete(cube1, rng):
    v = _discrete(cube1, "ND", 1, rng)
    vh, val = global_constrained_best(cube1, v, 1, curl_target=v.curl_field())
    assert val < 1e-20 and np.allclose(vh.coeffs, v.coeffs)


def test_constrained_zero_target_gradient(cube1):
    v = make_field("grad")
    zero = BrokenField(cube1, "RT", 1, np.zeros((cube1.n_tets, 15)))
    vh, _ = global_constrained_best(cube1, v, 1, curl_target=zero)
    assert np.abs(vh.curl_field().coeffs).max() < 1e-10 * np.abs(vh.coeffs).max()


def test_constrained_infeasible_target(cube1, rng):
    bad = BrokenField(cube1, "RT", 0, rng.standard_normal((cube1.n_tets, 4)))
    with pytest.raises(InfeasibleConstraints, match="residual"):
        global_constrained_best(cube1, make_field("trig"), 0, curl_target=bad)


def test_mixed_pi_div_identity(cube1, rng):
    # divergence-free conforming RT field: curl of a conforming ND field
    w = _discrete(cube1, "ND", 1, rng).curl_field()
    out = mixed_pi_div(cube1, w, 1)
    assert np.allclose(out.coeffs, w.coeffs, atol=1e-10 * np.abs(w.coeffs).max())


def test_mixed_pi_div_divergence_free(cube):
    f = AnalyticField("sx", lambda x: np.stack([np.sin(3 * x[:, 0]), x[:, 1] ** 2, x[:, 2]], axis=1),
                      lambda x: np.zeros((len(x), 3)))
    out = mixed_pi_div(cube, f, 1)
    for el in mesh_elements(cube):
        assert np.abs(div_matrix(el.shape, 1) @ out.coeffs[el.index]).max() < 1e-11 * np.abs(out.coeffs).max()


@pytest.mark.parametrize("bc", ["D", "N"])
def test_mixed_two_formulations(bc):
    m = generate(f"cube-kuhn:bc={bc}")
    v = make_field("trig-bc" if bc == "N" else "trig")
    a = mixed_pi_div(m, CurlView(v), 1)
    b = three_field_mixed(m, v, 1).curl
    assert np.abs(a.coeffs - b.coeffs).max() <= 1e-9 * np.abs(a.coeffs).max()


def test_localbest_zero_for_broken_discrete(cube1, rng):
    f = BrokenField(cube1, "ND", 1, rng.standard_normal((cube1.n_tets, 20)))
    lb, osc = localbest_terms(cube1, f, 1)
    assert lb.max() < 1e-24 and osc.max() < 1e-22


def test_localbest_matches_single_element_projection(cube1):
    v = make_field("trig")
    lb, _ = localbest_terms(cube1, v, 1)
    el = mesh_elements(cube1)[3]
    proj = l2_project(v, el, "ND", 1, degree=16)
    t, w = el.shape.volume_rule(16)
    x = el.to_phys(t)
    d = v.value(x) - proj(x)
    assert np.isclose(lb[3], np.einsum("nc,nc,n->", d, d, w), rtol=1e-10)


def test_equivalence_report_discrete(cube, rng):
    v = _discrete(cube, "ND", 1, rng)
    r = equivalence_report(cube, v, 1)
    assert r.ratio_constrained == 1.0 and r.ratio_unconstrained == 1.0


def test_equivalence_ratios_at_least_one(cube1):
    r = equivalence_report(cube1, make_field("trig"), 1, mixed=True)
    assert r.ratio_constrained >= 1 - 1e-9 and r.ratio_unconstrained >= 1 - 1e-9
    assert r.ratio_mixed >= 1 - 1e-9
    assert np.all(r.hp_terms >= 0) and np.all(r.localbest >= 0) and np.all(r.oscillation >= 0)
