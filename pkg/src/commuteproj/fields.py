"""Field containers: analytic callbacks and broken (elementwise) polynomial fields.

Anything with ``value(x, cells=None)`` and ``curl(x, cells=None)`` can be fed
to the projectors.  ``cells`` carries the element id of every point and is
only used by broken fields, whose values are multi-valued on element faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import TetMesh
from .polyspace import mesh_elements
from .quadrature import quadrature


@dataclass
class AnalyticField:
    name: str
    value_fn: Callable
    curl_fn: Callable
    div_fn: Callable | None = None
    degree: int | None = None  # polynomial degree, None for non-polynomial fields
    regularity: tuple = (np.inf, np.inf)

    def value(self, x, cells=None):
        return np.asarray(self.value_fn(np.atleast_2d(x)), dtype=float)

    def curl(self, x, cells=None):
        return np.asarray(self.curl_fn(np.atleast_2d(x)), dtype=float)

    def div(self, x, cells=None):
        if self.div_fn is None:
            raise NotImplementedError(f"field {self.name} has no divergence callback")
        return np.asarray(self.div_fn(np.atleast_2d(x)), dtype=float)

    __call__ = value

    def curl_field(self) -> "AnalyticField":
        """The field ``curl v`` (divergence-free) as an analytic field."""
        zero = lambda x: np.zeros(len(np.atleast_2d(x)))
        return AnalyticField(f"curl({self.name})", self.curl_fn, _no_curl(self.name),
                             zero, None if self.degree is None else max(self.degree - 1, 0))


def _no_curl(name):
    def fn(x):
        raise NotImplementedError(f"second curl of {name} is not available")
    return fn


@dataclass
class BrokenField:
    """Elementwise coefficients ``coeffs[k]`` in the local space ``family_q`` of element k."""

    mesh: TetMesh
    family: str
    q: int
    coeffs: np.ndarray
    name: str = "discrete"
    _elements: list = field(default=None, repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self._elements = mesh_elements(self.mesh)

    @property
    def degree(self):
        return self.q + (1 if self.family in ("ND", "RT") else 0)

    def _eval(self, x, cells, what):
        x = np.atleast_2d(x)
        if cells is None:
            raise ValueError("broken fields need the element id of every point")
        cells = np.broadcast_to(np.asarray(cells), (len(x),))
        out = np.zeros((len(x), 3)) if not (what == "div" or self.family == "P") else np.zeros(len(x))
        for k in np.unique(cells):
            m = cells == k
            el = self._elements[k]
            sp = el.space(self.family, self.q)
            t = el.to_ref(x[m])
            tab = {"value": sp.values, "curl": sp.curls, "div": sp.divs}[what](t)
            out[m] = np.tensordot(self.coeffs[k], tab, axes=(0, 0))
        return out

    def value(self, x, cells=None):
        return self._eval(x, cells, "value")

    def curl(self, x, cells=None):
        return self._eval(x, cells, "curl")

    def div(self, x, cells=None):
        return self._eval(x, cells, "div")

    # fast path used by the pipelines: values at reference points of a group of same-shape elements
    def sample(self, elements, t, what="value"):
        el0 = self._elements[elements[0]]
        sp = el0.space(self.family, self.q)
        tab = {"value": sp.values, "curl": sp.curls, "div": sp.divs}[what](t)
        return np.tensordot(self.coeffs[elements], tab, axes=(1, 0))

    def curl_field(self) -> "BrokenField":
        if self.family != "ND":
            raise ValueError("curl_field only for ND fields")
        from .polyspace import curl_map
        out = np.empty((self.mesh.n_tets, self._elements[0].space("RT", self.q).dim))
        for k, el in enumerate(self._elements):
            out[k] = curl_map(el.space("ND", self.q), el.space("RT", self.q)) @ self.coeffs[k]
        return BrokenField(self.mesh, "RT", self.q, out, f"curl({self.name})")

    def __add__(self, other):
        return BrokenField(self.mesh, self.family, self.q, self.coeffs + other.coeffs, self.name)

    def __sub__(self, other):
        return BrokenField(self.mesh, self.family, self.q, self.coeffs - other.coeffs, self.name)


class CurlView:
    """``curl v`` seen as a field whose ``value`` is the curl of ``v``."""

    def __init__(self, v):
        self.v = v

    def value(self, x, cells=None):
        return self.v.curl(x, cells)


def l2_norm(mesh: TetMesh, f, degree: int, what: str = "value", elements=None) -> np.ndarray:
    """Elementwise L2 norms of a field (or its curl) by quadrature: array over elements."""
    els = mesh_elements(mesh)
    idx = range(mesh.n_tets) if elements is None else elements
    out = []
    for k in idx:
        el = els[k]
        t, w = el.shape.volume_rule(degree)
        x = el.to_phys(t)
        v = getattr(f, what)(x, np.full(len(x), k))
        sq = np.sum(v ** 2, axis=1) if v.ndim > 1 else v ** 2
        out.append(np.sqrt(np.sum(w * sq)))
    return np.array(out)


def face_jumps(mesh: TetMesh, f: BrokenField, kind: str, degree: int | None = None):
    """Face L2 norms of normal (kind='normal') or tangential (kind='tangential') jumps.

    Returns ``(interior, neumann)`` arrays: jumps across interior faces and the
    trace itself on Neumann boundary faces.
    """
    from .mesh import INTERIOR, NEUMANN
    degree = 2 * f.degree if degree is None else degree
    rule = quadrature(2, degree)
    lam = rule.barycentric
    interior, neumann = [], []
    for fi in range(mesh.n_faces):
        tag = mesh.face_tag[fi]
        if tag not in (INTERIOR, NEUMANN):
            continue
        P = mesh.vertices[mesh.faces[fi]]
        x = lam @ P
        n = mesh.face_normal[fi]
        area = 0.5 * np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
        vals = []
        for k in mesh.face_tets[fi]:
            if k < 0:
                continue
            v = f.value(x, np.full(len(x), k))
            vals.append(v @ n if kind == "normal" else v - np.outer(v @ n, n))
        d = vals[0] - vals[1] if len(vals) == 2 else vals[0]
        nrm = np.sqrt(area * 2.0 * np.sum(rule.weights * (d ** 2 if d.ndim == 1 else np.sum(d ** 2, axis=1))))
        (interior if tag == INTERIOR else neumann).append(nrm)
    return np.array(interior), np.array(neumann)


def sample(f, mesh: TetMesh, elements, shape, t, what: str = "value") -> np.ndarray:
    """Values (or curl / div) of ``f`` at reference points ``t`` of same-shape elements.

    Returns (len(elements), len(t), 3) for vector quantities, (len(elements), len(t)) for div.
    """
    from .polyspace import centroids
    elements = np.asarray(elements)
    if isinstance(f, BrokenField) and f.mesh is mesh:
        return f.sample(elements, t, what)
    X = centroids(mesh)[elements][:, None, :] + (np.atleast_2d(t) @ shape.J.T)[None]
    flat = X.reshape(-1, 3)
    cells = np.repeat(elements, len(t))
    vals = getattr(f, what)(flat, cells)
    return np.asarray(vals).reshape(len(elements), len(t), *np.shape(vals)[1:])


# ---------------------------------------------------------------------------
# built-in field library

_PI = np.pi


def _stack(*cols):
    return np.stack(cols, axis=-1)


def _zero(x):
    return np.zeros(len(x))


def _sin_y():
    return AnalyticField(
        "sin-y",
        lambda x: _stack(np.sin(_PI * x[:, 1]), 0 * x[:, 0], 0 * x[:, 0]),
        lambda x: _stack(0 * x[:, 0], 0 * x[:, 0], -_PI * np.cos(_PI * x[:, 1])),
        _zero,
    )


def _trig():
    s, c = np.sin, np.cos
    return AnalyticField(
        "trig",
        lambda x: _stack(s(_PI * x[:, 1]), s(_PI * x[:, 2]), s(_PI * x[:, 0])),
        lambda x: -_PI * _stack(c(_PI * x[:, 2]), c(_PI * x[:, 0]), c(_PI * x[:, 1])),
        _zero,
    )


def _trig_low():
    """Unit-frequency version of ``trig``: asymptotic convergence already on coarse meshes."""
    s, c = np.sin, np.cos
    return AnalyticField(
        "trig-low",
        lambda x: _stack(s(x[:, 1]), s(x[:, 2]), s(x[:, 0])),
        lambda x: -_stack(c(x[:, 2]), c(x[:, 0]), c(x[:, 1])),
        _zero,
    )


def _trig_bc():
    """Tangential trace vanishes on the boundary of the unit cube."""
    s, c = np.sin, np.cos

    def val(x):
        sx, sy, sz = (s(_PI * x[:, k]) for k in range(3))
        return _stack(sy * sz, sx * sz, sx * sy)

    def crl(x):
        sx, sy, sz = (s(_PI * x[:, k]) for k in range(3))
        cx, cy, cz = (c(_PI * x[:, k]) for k in range(3))
        return _PI * _stack(sx * (cy - cz), sy * (cz - cx), sz * (cx - cy))

    return AnalyticField("trig-bc", val, crl, _zero)


def _sinxy():
    return AnalyticField(
        "sinxy",
        lambda x: _stack(0 * x[:, 0], 0 * x[:, 0], np.sin(x[:, 0] * x[:, 1])),
        lambda x: _stack(x[:, 0] * np.cos(x[:, 0] * x[:, 1]), -x[:, 1] * np.cos(x[:, 0] * x[:, 1]), 0 * x[:, 0]),
        _zero,
    )


def _grad():
    """Gradient of sin(pi x) sin(pi y) sin(pi z): curl-free."""
    s, c = np.sin, np.cos

    def val(x):
        sx, sy, sz = (s(_PI * x[:, k]) for k in range(3))
        cx, cy, cz = (c(_PI * x[:, k]) for k in range(3))
        return _PI * _stack(cx * sy * sz, sx * cy * sz, sx * sy * cz)

    def div(x):
        return -3 * _PI ** 2 * s(_PI * x[:, 0]) * s(_PI * x[:, 1]) * s(_PI * x[:, 2])

    return AnalyticField("grad", val, lambda x: np.zeros((len(x), 3)), div)


def _const():
    c = np.array([0.3, -1.2, 0.7])
    return AnalyticField("const", lambda x: np.tile(c, (len(x), 1)),
                         lambda x: np.zeros((len(x), 3)), _zero, degree=0)


def poly_field(degree: int, seed: int = 0) -> AnalyticField:
    from .polyspace import VectorPoly
    rng = np.random.default_rng(seed)
    vp = VectorPoly.random(degree, rng, center=(0.5, 0.5, 0.5))
    return AnalyticField(f"poly:{degree}", vp, vp.curl, vp.div, degree=degree)


FIELDS = {
    "sin-y": _sin_y,
    "trig": _trig,
    "trig-low": _trig_low,
    "trig-bc": _trig_bc,
    "sinxy": _sinxy,
    "grad": _grad,
    "const": _const,
}


def make_field(name: str, seed: int = 0) -> AnalyticField:
    """Built-in field by id: one of FIELDS or ``poly:k`` (random, seeded, degree k)."""
    if name.startswith("poly:"):
        return poly_field(int(name.split(":", 1)[1]), seed)
    if name not in FIELDS:
        raise KeyError(f"unknown field {name!r}; available: {sorted(FIELDS)} or poly:k")
    return FIELDS[name]()


def check_curl(f: AnalyticField, rng=None, n: int = 20, tol: float = 1e-6, box=(0.0, 1.0)) -> float:
    """Compare the curl callback with central differences at random points; raise if off."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.uniform(box[0] + 0.05, box[1] - 0.05, size=(n, 3))
    eps = 1e-5
    J = np.zeros((n, 3, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = eps
        J[:, :, d] = (f.value(x + e) - f.value(x - e)) / (2 * eps)
    fd = np.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0], J[:, 1, 0] - J[:, 0, 1]], axis=1)
    ex = f.curl(x)
    err = np.linalg.norm(fd - ex) / max(np.linalg.norm(ex), 1.0)
    if err > tol:
        raise ValueError(f"curl callback of field {f.name} disagrees with finite differences ({err:.2e})")
    return float(err)
