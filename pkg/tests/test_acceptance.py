"""Acceptance criteria 1-10, one test each."""

import time

import numpy as np
import pytest
from scipy.linalg import null_space

from commuteproj.cls import KktSolver
from commuteproj.harness import (ExperimentConfig, run_commute, run_convergence, run_equivalence, run_mixed,
                                 run_project, run_single_tet)
from commuteproj.interp import canonical_nd, canonical_rt, div_matrix, p_projection
from commuteproj.mesh import generate
from commuteproj.polyspace import Element, VectorPoly, curl_map, space_dimension
from conftest import random_tet, record

DECOMPOSITION = ("delta_divergence", "delta_moments", "delta_a_sum", "delta_a_divergence")
FEASIBILITY = ("tau_constraint", "sigma_a_constraint", "iota_constraint", "theta_mean", "theta_orthogonality",
               "theta_constraint", "delta_a_constraint", "datum_conformity", "datum_divergence", "h_constraint")


@pytest.fixture(scope="module")
def commute_runs():
    """Commuting-test runs shared by criteria 2, 4 and 5 (all with feasibility assertions on)."""
    runs = []
    t0 = time.perf_counter()
    for p in range(3):
        for field in ("trig", f"poly:{p + 2}", "grad"):
            runs.append(run_commute(ExperimentConfig(mesh="cube-kuhn:refined=1", degree=p, field=field)))
    main_seconds = time.perf_counter() - t0
    # essential boundary faces exercise the Neumann-type patches as well
    for bc in ("N", "mixed"):
        for p in range(3):
            runs.append(run_commute(ExperimentConfig(mesh=f"cube-kuhn:refined=1:bc={bc}", degree=p, field="trig-bc")))
    return runs, main_seconds


def _l2(w, vals):
    return float(np.sqrt(np.sum(w * (vals ** 2 if vals.ndim == 1 else np.sum(vals ** 2, axis=1)))))


def test_criterion_01_interpolators_commute():
    # both identities are first-order derivative identities; their round-off scales with
    # |v|_K / h_K, so that is the floor of the relative denominator (the target alone can cancel)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, naive = 0.0, 0.0
    tets = [Element.from_coords(random_tet(rng, 10.0).tet_coords(0)) for _ in range(20)]
    for q in range(4):
        for el in tets:
            t, w = el.shape.volume_rule(2 * q + 8)
            x = el.to_phys(t)
            P, RT = el.space("P", q), el.space("RT", q)
            C = curl_map(el.space("ND", q), RT)
            for _ in range(5):
                v = VectorPoly.random(int(rng.integers(0, q + 3)), rng, center=el.centroid)
                floor = _l2(w, v(x)) / el.h
                a = div_matrix(el.shape, q) @ canonical_rt(v, el, q).coeffs
                b = p_projection(el.shape, q, t, w, v.div(x))
                err, ref = _l2(w, (a - b) @ P.values(t)), _l2(w, b @ P.values(t))
                worst = max(worst, err / max(ref, floor))
                naive = max(naive, err / ref) if ref > 1e-8 * floor else naive
                c = C @ canonical_nd(v, el, q).coeffs
                d = canonical_rt(v.curl_poly(), el, q).coeffs
                err, ref = _l2(w, np.tensordot(c - d, RT.values(t), 1)), _l2(w, np.tensordot(d, RT.values(t), 1))
                worst = max(worst, err / max(ref, floor))
                naive = max(naive, err / ref) if ref > 1e-8 * floor else naive
    secs = time.perf_counter() - t0
    ok = worst <= 1e-11 and secs < 30
    record(1, ok, f"max relative {worst:.2e} (relative to nonzero targets alone: {naive:.2e}), {secs:.1f}s")
    assert ok


def test_criterion_02_commuting_projector(commute_runs):
    runs, secs = commute_runs
    main = runs[:9]
    worst = max(r.rows[0]["relative"] for r in main)
    ok = all(r.passed for r in main) and worst <= 1e-8 and secs < 180
    record(2, ok, f"max relative residual {worst:.2e} over p=0..2 x (trig, poly:p+2, grad), {secs:.1f}s")
    assert ok


def test_criterion_03_projection_property():
    t0 = time.perf_counter()
    rep = run_project(ExperimentConfig(mesh="cube-kuhn:refined=1", p_sweep=(0, 2), samples=20))
    secs = time.perf_counter() - t0
    worst = max(r["max_relative_error"] for r in rep.rows)
    ok = rep.passed and worst <= 1e-10 and secs < 120
    record(3, ok, f"max relative error {worst:.2e} (ND and RT, p=0..2), {secs:.1f}s")
    assert ok


def test_criterion_04_decomposition_identities(commute_runs):
    runs, _ = commute_runs
    worst = max(r.rows[0][k] for r in runs for k in DECOMPOSITION)
    ok = worst <= 1e-10
    record(4, ok, f"max scaled residual {worst:.2e} over {len(runs)} runs")
    assert ok


def test_criterion_05_feasibility(commute_runs):
    runs, _ = commute_runs
    worst = {k: max(r.rows[0][k] for r in runs) for k in FEASIBILITY}
    name = max(worst, key=worst.get)
    ok = worst[name] <= 1e-10
    record(5, ok, f"max scaled residual {worst[name]:.2e} ({name}) over {len(runs)} runs, assertions on")
    assert ok


def test_criterion_06_convergence_rates():
    t0 = time.perf_counter()
    rep = run_convergence(ExperimentConfig(mesh="cube-kuhn", field="trig-low", refine=3, p_sweep=(0, 2)))
    secs = time.perf_counter() - t0
    rates = [rep.extra[p] for p in range(3)]
    ok = all(abs(r - (p + 1)) <= 0.2 for p, r in enumerate(rates)) and secs < 600
    record(6, ok, "rates " + ", ".join(f"p={p}: {r:.3f}" for p, r in enumerate(rates)) + f", {secs:.1f}s")
    assert ok


def test_criterion_07_local_global_equivalence():
    details, ok = [], True
    for p in (0, 1):
        rep = run_equivalence(ExperimentConfig(mesh="cube-kuhn:refined=1", field="trig", degree=p))
        lows = [min(r["ratio_constrained"], r["ratio_unconstrained"]) for r in rep.rows[:2]]
        change = max(rep.extra["change"])
        ok = ok and min(lows) >= 1 - 1e-9 and change <= 2.0
        details.append(f"p={p}: min ratio {min(lows):.3f}, change {change:.3f}")
    record(7, ok, "; ".join(details))
    assert ok


def test_criterion_08_single_tet_p_robust():
    t0 = time.perf_counter()
    rep = run_single_tet(ExperimentConfig(mesh="reftet", field="trig-low", p_sweep=(0, 6)))
    secs = time.perf_counter() - t0
    rows = rep.rows[:-1]
    ordered = all(r["constrained"] >= r["unconstrained"] - 1e-12 for r in rows)
    growth = rep.extra["growth"]
    ok = ordered and growth <= 2.0 and secs < 120
    record(8, ok, f"growth p=6/p=0 {growth:.3f} (max/min {rep.extra['spread']:.2f}, "
                  f"max ratio {rep.extra['max_ratio']:.3f}), constrained >= unconstrained: {ordered}, {secs:.1f}s")
    assert ok


def test_criterion_09_mixed_consistency():
    rep = run_mixed(ExperimentConfig(mesh="cube-kuhn", degree=1, field="trig"))
    diff = rep.rows[0]["difference"]
    ok = generate("cube-kuhn").n_tets == 6 and diff <= 1e-9
    record(9, ok, f"KKT vs three-field difference {diff:.2e}")
    assert ok


def _oracle(M, b, B, d):
    xp = np.linalg.pinv(B) @ d if B.size else np.zeros(len(b))
    N = null_space(B) if B.size else np.eye(len(b))
    return xp + N @ np.linalg.solve(N.T @ M @ N, N.T @ (b - M @ xp)) if N.shape[1] else xp


def test_criterion_10_kkt_oracle():
    rng = np.random.default_rng(10)
    el = Element.from_coords(random_tet(rng).tet_coords(0))
    spaces = [(f, q) for f, q in [("P", 0), ("P", 1), ("P", 2), ("Pvec", 0), ("Pvec", 1), ("RT", 0), ("ND", 0),
                                   ("RT", 1), ("ND", 1)] if space_dimension(f, q) <= 12]
    worst, count = 0.0, 0
    for fam, q in spaces:
        M = el.space(fam, q).mass()
        n = M.shape[0]
        for _ in range(50):
            r = int(rng.integers(0, n + 1))
            B = rng.standard_normal((r, n))
            extra = int(rng.integers(0, 3)) if r else 0
            if extra:  # redundant but consistent rows
                B = np.vstack([B, rng.standard_normal((extra, r)) @ B])
            d = B @ rng.standard_normal(n)
            b = rng.standard_normal(n)
            x, _ = KktSolver(M, B).solve(b, d)
            ref = _oracle(M, b, B, d)
            worst = max(worst, np.abs(x - ref).max() / max(1.0, np.abs(ref).max()))
            count += 1
    ok = worst <= 1e-9
    record(10, ok, f"max deviation {worst:.2e} over {count} problems on {len(spaces)} spaces")
    assert ok
