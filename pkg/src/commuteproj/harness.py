"""Experiment drivers behind the ``commuteproj`` command line.

Every ``run_*`` function takes an :class:`ExperimentConfig` and returns a
:class:`Report` whose rows are written as CSV (see ``docs/csv.md``).
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cls import DEFAULT_TOL_FEAS, KktSolver
from .dofmap import global_dofmap
from .fields import AnalyticField, BrokenField, CurlView, check_curl, face_jumps, make_field
from .globalbest import (ZERO_REL, EquivReport, _ratio, equivalence_report, global_unconstrained_best, hp_terms,
                         localbest_terms, mixed_pi_div, three_field_mixed)
from .hcurl_proj import FeasibilityError, HcurlProjector, commute_residual
from .hdiv_proj import HdivProjector, default_quad_degree
from .interp import div_matrix, project_values
from .mesh import TetMesh, load_mesh, uniform_refine
from .polyspace import curl_map, mesh_elements

COMMUTE_TOL = 1e-8
COMMUTE_ABS_TOL = 1e-10
PROJECT_TOL = 1e-10
RATE_SLACK = 0.2

__all__ = ["ExperimentConfig", "Report", "EquivReport", "run_commute", "run_project", "run_convergence",
           "run_equivalence", "run_single_tet", "run_mixed", "estimate_rate", "write_csv", "read_csv",
           "patch_is_convex"]


@dataclass
class ExperimentConfig:
    mesh: str = "cube-kuhn:refined=1"
    degree: int = 1
    variant: str = "canonical"
    field: str = "trig"
    refine: int = 0
    quad_degree: int | None = None
    tol_feas: float = DEFAULT_TOL_FEAS
    seed: int = 0
    out: str | None = None
    p_sweep: tuple[int, int] | None = None
    check: bool = True  # feasibility assertions (disabled by --no-assert)
    samples: int = 20  # random fields for check-project

    def __post_init__(self):
        if self.variant not in ("canonical", "alternative"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "alternative" and min(self.degrees()) < 1:
            raise ValueError("variant=alternative needs p >= 1")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    def degrees(self) -> list[int]:
        if self.p_sweep is None:
            return [self.degree]
        a, b = self.p_sweep
        return list(range(a, b + 1))

    def build_mesh(self, extra: int = 0) -> TetMesh:
        mesh = load_mesh(self.mesh)
        for _ in range(self.refine + extra):
            mesh = uniform_refine(mesh)
        return mesh

    def build_field(self):
        f = make_field(self.field, self.seed)
        check_curl(f)
        return f


@dataclass
class Report:
    name: str
    rows: list[dict] = field(default_factory=list)
    passed: bool | None = None
    message: str = ""
    extra: dict = field(default_factory=dict)

    def status(self) -> str:
        if self.passed is None:
            return "DONE"
        return "PASS" if self.passed else "FAIL"


# ---------------------------------------------------------------------------
# CSV

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})


def _parse(s: str):
    if s == "":
        return None
    if s in ("True", "False"):
        return s == "True"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# helpers

def estimate_rate(errors, mesh_sizes) -> float:
    """Least-squares slope of log(error) against log(h)."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(mesh_sizes, dtype=float)
    if len(e) < 2 or len(e) != len(h):
        raise ValueError("need at least two (error, h) pairs")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("errors and mesh sizes must be positive")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def patch_is_convex(mesh: TetMesh, vertex: int, tol: float = 1e-12) -> bool:
    """Every patch vertex lies on the inner side of every boundary face of the patch."""
    patch = mesh.patch(vertex)
    pts = mesh.vertices[np.unique(mesh.tets_sorted[patch.elements])]
    el_set = set(patch.elements.tolist())
    for f in patch.boundary_faces:
        k = next(t for t in mesh.face_tets[f] if t >= 0 and t in el_set)
        P = mesh.vertices[mesh.faces[f]]
        n = np.cross(P[1] - P[0], P[2] - P[0])
        inner = mesh.vertices[mesh.tets_sorted[k]].mean(axis=0)
        if n @ (inner - P[0]) < 0:
            n = -n
        if np.any((pts - P[0]) @ n < -tol * np.linalg.norm(n) * mesh.h[k]):
            return False
    return True


def _base_row(cfg, mesh, p, level=0):
    return {"level": level, "n_tets": mesh.n_tets, "h_max": float(mesh.h.max()), "p": p,
            "variant": cfg.variant, "field": cfg.field}


def _rel(num, den, abs_tol):
    if den > 0:
        return num / den, num / den <= COMMUTE_TOL
    return num, num <= abs_tol


# ---------------------------------------------------------------------------
# experiments

def run_commute(cfg: ExperimentConfig, mesh: TetMesh | None = None) -> Report:
    """curl of the ND projection against the RT projection of the curl."""
    mesh = cfg.build_mesh() if mesh is None else mesh
    v = cfg.build_field()
    rep = Report("check-commute", passed=True)
    for p in cfg.degrees():
        t0 = time.perf_counter()
        proj = HcurlProjector(mesh, p, cfg.variant, cfg.quad_degree, cfg.tol_feas, cfg.check)
        res = proj.apply(v)
        num, den = commute_residual(res)
        rel, ok = _rel(num, den, COMMUTE_ABS_TOL)
        tj, tn = face_jumps(mesh, res.h, "tangential")
        hnorm = max(float(np.sqrt(np.sum(_l2sq(res.h)))), 1e-300)
        worst_el = int(np.argmax(_element_commute(res)))
        row = _base_row(cfg, mesh, p)
        row.update({"residual": num, "denominator": den, "relative": rel,
                    "tangential_jump": float(np.sqrt(np.sum(tj ** 2) + np.sum(tn ** 2))) / hnorm,
                    "worst_element": worst_el, "pass": ok, "seconds": time.perf_counter() - t0})
        row.update({k: float(v_) for k, v_ in res.checks.items()})
        rep.rows.append(row)
        rep.passed = rep.passed and ok
    return rep


def _l2sq(f: BrokenField):
    els = mesh_elements(f.mesh)
    return np.array([f.coeffs[e.index] @ e.space(f.family, f.q).mass() @ f.coeffs[e.index] for e in els])


def _element_commute(res) -> np.ndarray:
    els = mesh_elements(res.mesh)
    C = res.curl_coeffs()
    target = res.sigma.coeffs + (0 if res.variant == "canonical" else res.delta.coeffs)
    out = np.zeros(len(els))
    for e in els:
        d = C[e.index] - target[e.index]
        out[e.index] = d @ e.space("RT", res.p).mass() @ d
    return np.sqrt(np.maximum(out, 0.0))


def random_conforming(mesh: TetMesh, family: str, p: int, rng) -> BrokenField:
    dm = global_dofmap(mesh, family, p)
    return BrokenField(mesh, family, p, dm.gather(rng.standard_normal(dm.n_dofs)), f"random {family}_{p}")


def run_project(cfg: ExperimentConfig, mesh: TetMesh | None = None) -> Report:
    """Both projectors reproduce random conforming fields of their target space."""
    mesh = cfg.build_mesh() if mesh is None else mesh
    rng = np.random.default_rng(cfg.seed)
    rep = Report("check-project", passed=True)
    for p in cfg.degrees():
        pc = HcurlProjector(mesh, p, "canonical", cfg.quad_degree, cfg.tol_feas, cfg.check)
        pd = HdivProjector(mesh, p, "canonical", cfg.quad_degree, cfg.tol_feas, cfg.check)
        for kind, proj, fam in (("curl", pc, "ND"), ("div", pd, "RT")):
            worst = 0.0
            t0 = time.perf_counter()
            for _ in range(cfg.samples):
                u = random_conforming(mesh, fam, p, rng)
                out = proj.apply(u).h if kind == "curl" else proj.apply(u).sigma
                worst = max(worst, float(np.abs(out.coeffs - u.coeffs).max() / np.abs(u.coeffs).max()))
            ok = worst <= PROJECT_TOL
            row = _base_row(cfg, mesh, p)
            row.update({"variant": "canonical", "field": f"random-{fam}", "projector": kind,
                        "samples": cfg.samples, "max_relative_error": worst, "pass": ok,
                        "seconds": time.perf_counter() - t0})
            rep.rows.append(row)
            rep.passed = rep.passed and ok
    return rep


def run_convergence(cfg: ExperimentConfig) -> Report:
    """(m^2)^(1/2) on a sequence of uniform refinements; rate by least squares.

    ``cfg.refine`` is the number of refinements after the initial mesh (at least 2).
    """
    v = cfg.build_field()
    levels = max(cfg.refine, 2)
    base = replace(cfg, refine=0)
    meshes = [base.build_mesh()]
    for _ in range(levels):
        meshes.append(uniform_refine(meshes[-1]))
    rep = Report("convergence", passed=True)
    for p in cfg.degrees():
        errs, hs = [], []
        for lev, mesh in enumerate(meshes):
            t0 = time.perf_counter()
            _, m2 = global_unconstrained_best(mesh, v, p, cfg.quad_degree)
            e = float(np.sqrt(max(m2, 0.0)))
            errs.append(e)
            hs.append(float(mesh.h.max()))
            row = _base_row(cfg, mesh, p, lev)
            row.update({"m": e, "rate": np.nan if lev == 0 or errs[-2] == 0 or e == 0 else
                        float(np.log(errs[-2] / e) / np.log(hs[-2] / hs[-1])),
                        "seconds": time.perf_counter() - t0})
            rep.rows.append(row)
        if max(errs) <= 1e-12 * max(1.0, errs[0]):
            rep.extra[p] = "exact"
            continue
        if np.any(np.diff(errs) > 0):
            warnings.warn(f"p={p}: error sequence is not monotone", RuntimeWarning)
        rate = estimate_rate(errs, hs)
        rep.extra[p] = rate
        ok = abs(rate - (p + 1)) <= RATE_SLACK
        rep.rows.append({"level": "fit", "p": p, "field": cfg.field, "rate": rate,
                         "expected": p + 1, "pass": ok})
        rep.passed = rep.passed and ok
    return rep


def run_equivalence(cfg: ExperimentConfig) -> Report:
    """Local-best versus global-best ratios on the configured mesh and one refinement of it.

    With ``p_sweep`` the lowered-degree right-hand side (ND_{p-1}, RT_{p-1},
    weight h_K/p) is used instead, and the hypotheses of that bound (no
    Dirichlet faces, convex patches) are checked and reported.
    """
    v = cfg.build_field()
    mesh0 = cfg.build_mesh()
    rep = Report("equivalence")
    if cfg.p_sweep is not None:
        return _equivalence_sweep(cfg, v, mesh0, rep)
    rep.passed = True
    meshes = [mesh0, uniform_refine(mesh0)]
    p = cfg.degree
    ratios = []
    for lev, mesh in enumerate(meshes):
        t0 = time.perf_counter()
        use_mixed = p >= 1 and _mixed_hypotheses(mesh)
        r = equivalence_report(mesh, v, p, cfg.quad_degree, mixed=use_mixed)
        row = _base_row(cfg, mesh, p, lev)
        row.update(_report_row(r))
        row["seconds"] = time.perf_counter() - t0
        rep.rows.append(row)
        ratios.append((r.ratio_constrained, r.ratio_unconstrained))
        ok = min(r.ratio_constrained, r.ratio_unconstrained) >= 1 - 1e-9
        rep.passed = rep.passed and ok
    change = [max(a, b) / min(a, b) for a, b in zip(ratios[0], ratios[1])]
    rep.extra["change"] = change
    rep.passed = rep.passed and max(change) <= 2.0
    rep.rows.append({"level": "change", "p": p, "ratio_constrained": change[0],
                     "ratio_unconstrained": change[1], "pass": rep.passed})
    return rep


def _mixed_hypotheses(mesh: TetMesh) -> bool:
    """Either no Dirichlet faces or no Neumann faces (the setting of the global-projection variant)."""
    from .mesh import DIRICHLET, NEUMANN
    tags = set(np.unique(mesh.face_tag).tolist())
    return not (DIRICHLET in tags and NEUMANN in tags)


def _report_row(r: EquivReport) -> dict:
    row = {"m2": r.m2, "constrained": r.constrained, "localbest": float(r.localbest.sum()),
           "oscillation": float(r.oscillation.sum()), "right": r.right,
           "ratio_constrained": r.ratio_constrained, "ratio_unconstrained": r.ratio_unconstrained,
           "mixed": r.mixed, "ratio_mixed": r.ratio_mixed,
           "hp_sum": None if r.hp_terms is None else float(r.hp_terms.sum())}
    return row


def _equivalence_sweep(cfg, v, mesh, rep):
    if min(cfg.degrees()) < 1:
        raise ValueError("the lowered-degree bound needs p >= 1")
    no_dirichlet = not mesh.has_dirichlet()
    convex = [patch_is_convex(mesh, a) for a in range(mesh.n_vertices)]
    if not no_dirichlet:
        warnings.warn("lowered-degree bound assumes no Dirichlet faces", RuntimeWarning)
    if not all(convex):
        warnings.warn(f"{len(convex) - sum(convex)} vertex patches are not convex", RuntimeWarning)
    ratios = []
    for p in cfg.degrees():
        t0 = time.perf_counter()
        _, m2 = global_unconstrained_best(mesh, v, p, cfg.quad_degree)
        lb, osc = localbest_terms(mesh, v, p - 1, cfg.quad_degree, weight_degree=p - 1)
        right = float(lb.sum() + osc.sum())
        ratio = _ratio(m2, right, ZERO_REL * float(hp_terms(mesh, v, p, cfg.quad_degree).sum()))
        ratios.append(ratio)
        row = _base_row(cfg, mesh, p)
        row.update({"m2": m2, "localbest_lowered": float(lb.sum()), "oscillation_lowered": float(osc.sum()),
                    "right": right, "ratio": ratio, "no_dirichlet": no_dirichlet,
                    "convex_patches": int(sum(convex)), "patches": len(convex),
                    "seconds": time.perf_counter() - t0})
        rep.rows.append(row)
    growth = ratios[-1] / ratios[0] if ratios[0] > 0 else np.inf
    spread = max(ratios) / min(ratios) if min(ratios) > 0 else np.inf
    rep.extra.update(growth=growth, spread=spread)
    rep.rows.append({"level": "growth", "ratio": growth, "spread": spread})
    return rep


def single_tet_terms(element, v, p: int, quad_degree: int | None = None) -> dict:
    """Constrained and unconstrained ND_p best approximation on one element, and the oscillation.

    The constraint is curl v_h = tau with tau the divergence-free RT_p best
    approximation of curl v.
    """
    sh = element.shape
    deg = default_quad_degree(p) if quad_degree is None else quad_degree
    t, w = sh.volume_rule(deg)
    x = element.to_phys(t)
    V, W = v.value(x), v.curl(x)
    nd, rt = sh.space("ND", p), sh.space("RT", p)
    Vb, Rb = nd.values(t), rt.values(t)

    def resid(F, B, c):
        d = F - np.tensordot(c, B, axes=(0, 0))
        return float(np.sqrt(max(np.einsum("nc,nc,n->", d, d, w), 0.0)))

    tau, _ = KktSolver(rt.mass(), div_matrix(sh, p)).solve(np.einsum("nc,knc,n->k", W, Rb, w))
    load = np.einsum("nc,knc,n->k", V, Vb, w)
    c_con, _ = KktSolver(nd.mass(), curl_map(nd, rt)).solve(load, tau, scale=float(np.abs(tau).max()))
    c_unc = np.linalg.solve(nd.mass(), load)
    c_osc = project_values(sh, "RT", p, t, w, W)
    osc = sh.h / (p + 1) * resid(W, Rb, c_osc)
    return {"constrained": resid(V, Vb, c_con), "unconstrained": resid(V, Vb, c_unc), "oscillation": osc,
            "curl_gap": resid(W, Rb, tau), "norm": resid(V, Vb, np.zeros(len(Vb)))}


def run_single_tet(cfg: ExperimentConfig) -> Report:
    """p-sweep (default 0..6) of constrained / (unconstrained + oscillation) on a single element."""
    mesh = cfg.build_mesh()
    if mesh.n_tets != 1:
        raise ValueError("single-tet needs a one-element mesh (e.g. --mesh reftet)")
    v = cfg.build_field()
    el = mesh_elements(mesh)[0]
    degrees = cfg.degrees() if cfg.p_sweep is not None else list(range(7))
    rep = Report("single-tet", passed=True)
    ratios = []
    for p in degrees:
        t0 = time.perf_counter()
        r = single_tet_terms(el, v, p, cfg.quad_degree)
        ratio = _ratio(r["constrained"], r["unconstrained"] + r["oscillation"], np.sqrt(ZERO_REL) * r["norm"])
        ok = r["constrained"] >= r["unconstrained"] - 1e-12 * max(1.0, r["unconstrained"])
        ratios.append(ratio)
        row = _base_row(cfg, mesh, p)
        row.update(r)
        row.update({"ratio": ratio, "pass": ok, "seconds": time.perf_counter() - t0})
        rep.rows.append(row)
        rep.passed = rep.passed and ok
    # growth from the first to the last degree; the max/min spread is reported alongside
    # because the oscillation term alternates between even and odd degrees
    growth = ratios[-1] / ratios[0] if ratios[0] > 0 else np.inf
    spread = max(ratios) / min(ratios) if min(ratios) > 0 else np.inf
    rep.extra.update(growth=growth, spread=spread, max_ratio=max(ratios))
    rep.passed = rep.passed and growth <= 2.0
    rep.rows.append({"level": "growth", "ratio": growth, "spread": spread, "max_ratio": max(ratios),
                     "pass": rep.passed})
    return rep


def run_mixed(cfg: ExperimentConfig) -> Report:
    """Divergence-free RT projection of curl v: dense KKT versus the three-field mixed system."""
    mesh = cfg.build_mesh()
    v = cfg.build_field()
    rep = Report("mixed", passed=True)
    for p in cfg.degrees():
        t0 = time.perf_counter()
        kkt = mixed_pi_div(mesh, CurlView(v), p, cfg.quad_degree)
        sol = three_field_mixed(mesh, v, p, quad_degree=cfg.quad_degree)
        scale = max(float(np.abs(kkt.coeffs).max()), 1e-300)
        diff = float(np.abs(kkt.coeffs - sol.curl.coeffs).max()) / scale
        div = max(float(np.abs(div_matrix(e.shape, p) @ kkt.coeffs[e.index]).max())
                  for e in mesh_elements(mesh)) / scale
        ok = diff <= 1e-9
        row = _base_row(cfg, mesh, p)
        row.update({"difference": diff, "divergence": div, "pass": ok, "seconds": time.perf_counter() - t0})
        rep.rows.append(row)
        rep.passed = rep.passed and ok
    return rep


RUNNERS = {
    "check-commute": run_commute,
    "check-project": run_project,
    "convergence": run_convergence,
    "equivalence": run_equivalence,
    "single-tet": run_single_tet,
    "mixed": run_mixed,
}


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]


__all__ += ["RUNNERS", "FeasibilityError", "AnalyticField", "single_tet_terms", "random_conforming"]
