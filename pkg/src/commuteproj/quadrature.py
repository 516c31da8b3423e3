"""Collapsed-coordinate Gauss-Jacobi rules on the reference segment, triangle and tetrahedron.

All rules live on reference simplices with vertices at the origin and the unit
vectors.  Weights sum to the reference measure (1, 1/2 and 1/6 respectively).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 30


class QuadratureDegreeError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    """Quadrature on a reference simplex.

    ``points`` are reference coordinates (shape ``(n, dim)``); ``barycentric``
    returns the full barycentric coordinates with the vertex at the origin first.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def barycentric(self) -> np.ndarray:
        lam0 = 1.0 - self.points.sum(axis=1, keepdims=True)
        return np.hstack([lam0, self.points])

    def __len__(self):
        return len(self.weights)


def _gauss_jacobi01(n: int, alpha: int):
    """Nodes/weights for int_0^1 (1-t)^alpha f(t) dt, exact to degree 2n-1."""
    x, w = roots_jacobi(n, alpha, 0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


def _npts(degree: int) -> int:
    if degree < 0:
        degree = 0
    if degree > MAX_DEGREE:
        raise QuadratureDegreeError(f"quadrature degree {degree} exceeds {MAX_DEGREE}")
    return degree // 2 + 1


@lru_cache(maxsize=None)
def segment_rule(degree: int) -> QuadRule:
    t, w = _gauss_jacobi01(_npts(degree), 0)
    return QuadRule(t[:, None], w, degree)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadRule:
    n = _npts(degree)
    u, wu = _gauss_jacobi01(n, 0)
    v, wv = _gauss_jacobi01(n, 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.stack([U * (1.0 - V), V], axis=-1).reshape(-1, 2)
    return QuadRule(pts, W.ravel(), degree)


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> QuadRule:
    n = _npts(degree)
    u, wu = _gauss_jacobi01(n, 0)
    v, wv = _gauss_jacobi01(n, 1)
    w, ww = _gauss_jacobi01(n, 2)
    U, V, Wc = np.meshgrid(u, v, w, indexing="ij")
    weights = (wu[:, None, None] * wv[None, :, None] * ww[None, None, :]).ravel()
    z = Wc
    y = V * (1.0 - Wc)
    x = U * (1.0 - V) * (1.0 - Wc)
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    return QuadRule(pts, weights, degree)


def quadrature(dim: int, degree: int) -> QuadRule:
    """Rule on the reference simplex of dimension ``dim`` exact to ``degree``."""
    if dim == 1:
        return segment_rule(int(degree))
    if dim == 2:
        return triangle_rule(int(degree))
    if dim == 3:
        return tet_rule(int(degree))
    raise ValueError(f"unsupported simplex dimension {dim}")
