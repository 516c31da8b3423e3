"""Conforming tetrahedral meshes: topology, orientation, vertex patches, refinement.

Conventions
-----------
* Every tetrahedron is also stored with its vertex ids sorted ascending
  (``tets_sorted``).  Local edges and faces are enumerated on that sorted
  order, so a local edge/face orientation always agrees with the global one
  (edges low -> high id, faces by their sorted vertex triple).
* ``face_normal`` is the unit normal of the sorted triple ``(a, b, c)``,
  ``(xb - xa) x (xc - xa)``; it is the fixed normal for all jumps.
* Boundary faces carry tag ``DIRICHLET`` or ``NEUMANN``; interior faces ``INTERIOR``.
  Discrete H(curl)/H(div) spaces have vanishing traces on Neumann faces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations
from pathlib import Path

import numpy as np

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
TAG_NAMES = {"D": DIRICHLET, "N": NEUMANN}

LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
LOCAL_FACES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    faces: np.ndarray
    tets_sorted: np.ndarray
    tet_edges: np.ndarray
    tet_faces: np.ndarray
    face_tets: np.ndarray
    face_tag: np.ndarray
    volume: np.ndarray
    h: np.ndarray
    rho: np.ndarray
    face_normal: np.ndarray
    _patches: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def vertex_tets(self) -> list[np.ndarray]:
        buckets: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for k, tet in enumerate(self.tets_sorted):
            for v in tet:
                buckets[v].append(k)
        return [np.array(b, dtype=int) for b in buckets]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        bf = self.faces[self.face_tag != INTERIOR]
        return np.unique(bf)

    @cached_property
    def boundary_edges(self) -> dict[int, set]:
        """Map tag -> set of edge ids lying on boundary faces with that tag."""
        out = {DIRICHLET: set(), NEUMANN: set()}
        edge_index = self.edge_index
        for f in np.flatnonzero(self.face_tag != INTERIOR):
            a, b, c = self.faces[f]
            for e in ((a, b), (a, c), (b, c)):
                out[int(self.face_tag[f])].add(edge_index[e])
        return out

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}

    @cached_property
    def face_index(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in f): i for i, f in enumerate(self.faces)}

    def shape_regularity(self) -> float:
        return shape_regularity(self)

    def patch(self, vertex: int) -> "VertexPatch":
        if vertex not in self._patches:
            self._patches[vertex] = vertex_patch(self, vertex)
        return self._patches[vertex]

    def patches(self):
        return [self.patch(a) for a in range(self.n_vertices)]

    def element_neighbourhood(self, k: int) -> np.ndarray:
        """Elements sharing a vertex with ``k`` or with one of its vertex-neighbours."""
        first = np.unique(np.concatenate([self.vertex_tets[v] for v in self.tets_sorted[k]]))
        verts = np.unique(self.tets_sorted[first])
        return np.unique(np.concatenate([self.vertex_tets[v] for v in verts]))

    def tet_coords(self, k: int) -> np.ndarray:
        """Vertex coordinates of tet ``k`` in sorted-id order, shape (4, 3)."""
        return self.vertices[self.tets_sorted[k]]

    @property
    def diameter(self) -> float:
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def has_dirichlet(self) -> bool:
        return bool(np.any(self.face_tag == DIRICHLET))


@dataclass(eq=False)
class VertexPatch:
    vertex: int
    elements: np.ndarray
    kind: str  # "interior" | "neumann" | "dirichlet"
    gamma_d: frozenset  # Dirichlet faces containing the vertex
    boundary_faces: frozenset  # faces on the boundary of the patch subdomain
    faces: np.ndarray
    edges: np.ndarray
    diameter: float

    @cached_property
    def essential_faces(self) -> frozenset:
        """Faces of the patch boundary where patch-space traces must vanish."""
        return frozenset(self.boundary_faces - self.gamma_d)

    def local_vertex(self, mesh: TetMesh, k: int) -> int:
        idx = np.flatnonzero(mesh.tets_sorted[k] == self.vertex)
        if len(idx) != 1:
            raise MeshError(f"element {k} is not in the patch of vertex {self.vertex}")
        return int(idx[0])


def _tet_geometry(X: np.ndarray):
    """Signed volume, diameter and inscribed-ball diameter for stacked tets (n, 4, 3)."""
    J = X[:, 1:] - X[:, :1]
    vol = np.linalg.det(J) / 6.0
    h = np.zeros(len(X))
    for i, j in LOCAL_EDGES:
        h = np.maximum(h, np.linalg.norm(X[:, i] - X[:, j], axis=1))
    area = np.zeros(len(X))
    for i, j, k in LOCAL_FACES:
        area += 0.5 * np.linalg.norm(np.cross(X[:, j] - X[:, i], X[:, k] - X[:, i]), axis=1)
    rho = 2.0 * 3.0 * np.abs(vol) / area
    return vol, h, rho


def build_mesh(nodes, tets, boundary_face_tags=None, *, check_conformity: bool = True) -> TetMesh:
    """Build a :class:`TetMesh`.

    ``boundary_face_tags`` maps vertex triples (any order) to ``"D"``/``"N"`` (or
    the integer tags).  ``None`` tags every boundary face Dirichlet.
    """
    X = np.asarray(nodes, dtype=float)
    T = np.asarray(tets, dtype=int)
    if X.ndim != 2 or X.shape[1] != 3:
        raise MeshError("nodes must have shape (n, 3)")
    if T.ndim != 2 or T.shape[1] != 4:
        raise MeshError("tets must have shape (m, 4)")
    if T.min(initial=0) < 0 or T.max(initial=-1) >= len(X):
        raise MeshError("tet references a non-existent node")
    if np.any([len(set(t)) < 4 for t in T]):
        raise MeshError("tet with repeated vertex")

    Ts = np.sort(T, axis=1)
    vol, h, rho = _tet_geometry(X[Ts])
    bad = np.flatnonzero(np.abs(vol) <= 1e-14 * h**3)
    if len(bad):
        raise MeshError(f"degenerate (non-positive volume) tet {int(bad[0])}")

    edge_keys = Ts[:, LOCAL_EDGES].reshape(-1, 2)
    edges, tet_edges = np.unique(edge_keys, axis=0, return_inverse=True)
    tet_edges = tet_edges.reshape(-1, 6)
    face_keys = Ts[:, LOCAL_FACES].reshape(-1, 3)
    faces, tet_faces = np.unique(face_keys, axis=0, return_inverse=True)
    tet_faces = tet_faces.reshape(-1, 4)

    face_tets = -np.ones((len(faces), 2), dtype=int)
    counts = np.zeros(len(faces), dtype=int)
    for k in range(len(T)):
        for f in tet_faces[k]:
            if counts[f] >= 2:
                raise MeshError(f"non-conforming mesh: face {tuple(faces[f])} shared by more than two tets")
            face_tets[f, counts[f]] = k
            counts[f] += 1

    face_tag = np.full(len(faces), INTERIOR, dtype=int)
    boundary = counts == 1
    face_lookup = {tuple(f): i for i, f in enumerate(faces.tolist())}
    if boundary_face_tags is None:
        face_tag[boundary] = DIRICHLET
    else:
        items = boundary_face_tags.items() if isinstance(boundary_face_tags, dict) else boundary_face_tags
        for tri, tag in items:
            key = tuple(sorted(int(v) for v in tri))
            if key not in face_lookup:
                raise MeshError(f"tagged face {key} is not a mesh face")
            f = face_lookup[key]
            if not boundary[f]:
                raise MeshError(f"tagged face {key} is an interior face")
            t = TAG_NAMES.get(tag, tag) if isinstance(tag, str) else int(tag)
            if t not in (DIRICHLET, NEUMANN):
                raise MeshError(f"unknown boundary tag {tag!r}")
            face_tag[f] = t
        missing = np.flatnonzero(boundary & (face_tag == INTERIOR))
        if len(missing):
            raise MeshError(f"untagged boundary face {tuple(faces[missing[0]])}")

    if check_conformity:
        _check_no_hanging_vertices(X, Ts)

    P = X[faces]
    nrm = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)

    return TetMesh(
        vertices=X, tets=T.copy(), edges=edges, faces=faces, tets_sorted=Ts,
        tet_edges=tet_edges, tet_faces=tet_faces, face_tets=face_tets, face_tag=face_tag,
        volume=np.abs(vol), h=h, rho=rho, face_normal=nrm,
    )


def _check_no_hanging_vertices(X, Ts, chunk=256):
    # a mesh vertex inside (or on the boundary of) a tet it does not belong to
    # means the intersection rule is broken
    used = np.unique(Ts)
    Y = X[used]
    for start in range(0, len(Ts), chunk):
        block = Ts[start:start + chunk]
        P0 = X[block[:, 0]]
        J = np.stack([X[block[:, i]] - P0 for i in (1, 2, 3)], axis=-1)
        Jinv = np.linalg.inv(J)
        s = np.einsum("kij,kpj->kpi", Jinv, Y[None, :, :] - P0[:, None, :])
        lam = np.concatenate([1.0 - s.sum(axis=2, keepdims=True), s], axis=2)
        inside = np.all(lam >= -1e-10, axis=2)
        for kk, row in enumerate(inside):
            hits = used[row]
            extra = np.setdiff1d(hits, block[kk])
            if len(extra):
                raise MeshError(
                    f"non-conforming mesh: vertex {int(extra[0])} lies in tet {start + kk}")


def shape_regularity(mesh: TetMesh) -> float:
    """max over elements of diameter / inscribed-ball diameter."""
    return float(np.max(mesh.h / mesh.rho))


def vertex_patch(mesh: TetMesh, vertex: int) -> VertexPatch:
    if not 0 <= vertex < mesh.n_vertices:
        raise MeshError(f"vertex {vertex} does not exist")
    elements = mesh.vertex_tets[vertex]
    fids = np.unique(mesh.tet_faces[elements])
    eids = np.unique(mesh.tet_edges[elements])
    el_set = set(elements.tolist())
    bfaces = set()
    for f in fids:
        inside = [t for t in mesh.face_tets[f] if t >= 0 and t in el_set]
        if len(inside) == 1:
            bfaces.add(int(f))
    touching = [f for f in fids if vertex in mesh.faces[f] and mesh.face_tag[f] != INTERIOR]
    gamma_d = frozenset(int(f) for f in touching if mesh.face_tag[f] == DIRICHLET)
    if not touching:
        kind = "interior"
    elif gamma_d:
        kind = "dirichlet"
    else:
        kind = "neumann"
    pts = mesh.vertices[np.unique(mesh.tets_sorted[elements])]
    diam = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=2)))
    return VertexPatch(vertex, elements, kind, gamma_d, frozenset(bfaces), fids, eids, diam)


def hat_eval(mesh: TetMesh, patch: VertexPatch, element: int, points):
    """Hat function of the patch vertex on ``element``: values and (constant) gradient."""
    if element not in set(patch.elements.tolist()):
        raise MeshError(f"element {element} is not in the patch of vertex {patch.vertex}")
    i = patch.local_vertex(mesh, element)
    lam, grads = barycentric(mesh.tet_coords(element), points)
    return lam[:, i], grads[i]


def barycentric(X4: np.ndarray, points) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of ``points`` in the tet ``X4`` and their gradients."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    J = (X4[1:] - X4[0]).T
    Jinv = np.linalg.inv(J)
    s = (pts - X4[0]) @ Jinv.T
    lam = np.hstack([1.0 - s.sum(axis=1, keepdims=True), s])
    grads = np.vstack([-Jinv.sum(axis=0), Jinv])
    return lam, grads


# ---------------------------------------------------------------------------
# refinement

def uniform_refine(mesh: TetMesh) -> TetMesh:
    """Red refinement (8 children per tet) following Bey's vertex ordering.

    The stored (not sorted) vertex order of each tet drives the choice of the
    interior diagonal, which keeps the number of similarity classes bounded.
    """
    X = mesh.vertices
    mid: dict[tuple[int, int], int] = {}
    new_pts = [X]
    nxt = len(X)
    for a, b in mesh.edges:
        mid[(int(a), int(b))] = nxt
        nxt += 1
    new_pts.append(0.5 * (X[mesh.edges[:, 0]] + X[mesh.edges[:, 1]]))

    def m(a, b):
        return mid[(a, b) if a < b else (b, a)]

    children = []
    for t in mesh.tets.tolist():
        x0, x1, x2, x3 = t
        x01, x02, x03 = m(x0, x1), m(x0, x2), m(x0, x3)
        x12, x13, x23 = m(x1, x2), m(x1, x3), m(x2, x3)
        children += [
            (x0, x01, x02, x03), (x01, x1, x12, x13), (x02, x12, x2, x23), (x03, x13, x23, x3),
            (x01, x02, x03, x13), (x01, x02, x12, x13), (x02, x03, x13, x23), (x02, x12, x13, x23),
        ]
    tags = {}
    for f in np.flatnonzero(mesh.face_tag != INTERIOR):
        a, b, c = (int(v) for v in mesh.faces[f])
        ab, ac, bc = m(a, b), m(a, c), m(b, c)
        for tri in ((a, ab, ac), (b, ab, bc), (c, ac, bc), (ab, bc, ac)):
            tags[tri] = int(mesh.face_tag[f])
    return build_mesh(np.vstack(new_pts), np.array(children), tags, check_conformity=False)


# ---------------------------------------------------------------------------
# generators and file IO

def reference_tet(tag: str = "D") -> TetMesh:
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    tags = {f: tag for f in LOCAL_FACES}
    return build_mesh(nodes, [[0, 1, 2, 3]], tags)


def cube_kuhn(bc: str = "D") -> TetMesh:
    """Unit cube split into the 6 Kuhn (Freudenthal) tetrahedra.

    ``bc``: ``"D"`` all Dirichlet, ``"N"`` all Neumann, ``"mixed"`` Neumann on
    the face ``x = 0`` and Dirichlet elsewhere.
    """
    nodes = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=float)
    tets = []
    for perm in permutations(range(3)):
        path = [0]
        for axis in perm:
            path.append(path[-1] | (1 << axis))
        tets.append(path)
    mesh = build_mesh(nodes, tets, None)
    return retag_cube(mesh, bc)


def retag_cube(mesh: TetMesh, bc: str) -> TetMesh:
    if bc == "D":
        return mesh
    tags = {}
    for f in np.flatnonzero(mesh.face_tag != INTERIOR):
        tri = tuple(int(v) for v in mesh.faces[f])
        if bc == "N":
            tags[tri] = NEUMANN
        elif bc == "mixed":
            on_x0 = np.allclose(mesh.vertices[list(tri), 0], 0.0)
            tags[tri] = NEUMANN if on_x0 else DIRICHLET
        else:
            raise MeshError(f"unknown boundary condition set {bc!r}")
    return build_mesh(mesh.vertices, mesh.tets, tags, check_conformity=False)


def generate(spec: str) -> TetMesh:
    """Built-in meshes: ``reftet``, ``cube-kuhn``, ``cube-kuhn:refined=k`` (``:bc=D|N|mixed``)."""
    name, *opts = spec.split(":")
    kw = {}
    for o in opts:
        if "=" not in o:
            raise MeshError(f"bad generator option {o!r}")
        k, v = o.split("=", 1)
        kw[k.strip()] = v.strip()
    bc = kw.pop("bc", "D")
    refined = int(kw.pop("refined", 0))
    if kw:
        raise MeshError(f"unknown generator options {sorted(kw)}")
    if name == "reftet":
        mesh = reference_tet("N" if bc == "N" else "D")
    elif name == "cube-kuhn":
        mesh = cube_kuhn(bc)
    else:
        raise MeshError(f"unknown mesh generator {name!r}")
    for _ in range(refined):
        mesh = uniform_refine(mesh)
    return mesh


def load_mesh(spec) -> TetMesh:
    """Generator name or path to a plain-text mesh file."""
    p = Path(str(spec))
    if p.exists():
        return read_mesh(p)
    return generate(str(spec))


_SECTION = re.compile(r"^\$(\w+)\s+(\d+)\s*$")


def read_mesh(path) -> TetMesh:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    sections: dict[str, list[str]] = {}
    i = 0
    while i < len(lines):
        m = _SECTION.match(lines[i])
        if not m:
            raise MeshError(f"expected section header, got {lines[i]!r}")
        name, count = m.group(1), int(m.group(2))
        sections[name] = lines[i + 1:i + 1 + count]
        if len(sections[name]) != count:
            raise MeshError(f"section ${name} truncated")
        i += 1 + count
    for req in ("nodes", "tets", "bfaces"):
        if req not in sections:
            raise MeshError(f"missing section ${req}")
    nodes = np.array([[float(x) for x in ln.split()] for ln in sections["nodes"]]).reshape(-1, 3)
    tets = np.array([[int(x) for x in ln.split()] for ln in sections["tets"]], dtype=int).reshape(-1, 4)
    tags = {}
    for ln in sections["bfaces"]:
        a, b, c, t = ln.split()
        tags[(int(a), int(b), int(c))] = t
    return build_mesh(nodes, tets, tags)


def write_mesh(mesh: TetMesh, path) -> None:
    out = [f"$nodes {mesh.n_vertices}"]
    out += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    out.append(f"$tets {mesh.n_tets}")
    out += [" ".join(str(int(i)) for i in t) for t in mesh.tets]
    bf = np.flatnonzero(mesh.face_tag != INTERIOR)
    out.append(f"$bfaces {len(bf)}")
    for f in bf:
        tag = "D" if mesh.face_tag[f] == DIRICHLET else "N"
        out.append(" ".join(str(int(i)) for i in mesh.faces[f]) + f" {tag}")
    Path(path).write_text("\n".join(out) + "\n")
