"""Global and patch-local numbering of ND / RT degrees of freedom.

Local bases are dual to moment functionals defined from the sorted global
vertex order, so two elements sharing an edge or face carry identical
functionals there and conformity reduces to identifying indices (no signs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import NEUMANN, TetMesh, VertexPatch


def entity_counts(family: str, q: int) -> tuple[int, int, int]:
    """DOFs per edge, per face and in the interior of one element."""
    if family == "ND":
        return q + 1, q * (q + 1), 3 * (q - 1) * q * (q + 1) // 6
    if family == "RT":
        return 0, (q + 1) * (q + 2) // 2, 3 * q * (q + 1) * (q + 2) // 6
    raise ValueError(f"no conforming numbering for family {family!r}")


def local_entity_slices(family: str, q: int):
    """For local dof index: (kind, local entity index, offset within entity) as arrays."""
    ne, nf, ni = entity_counts(family, q)
    kind, ent, off = [], [], []
    for e in range(6 if ne else 0):
        kind += [0] * ne
        ent += [e] * ne
        off += list(range(ne))
    for f in range(4 if nf else 0):
        kind += [1] * nf
        ent += [f] * nf
        off += list(range(nf))
    kind += [2] * ni
    ent += [0] * ni
    off += list(range(ni))
    return np.array(kind), np.array(ent), np.array(off)


@dataclass
class DofMap:
    """Element-to-space numbering; ``cell_dofs[k, j] = -1`` marks a removed (essential) DOF."""

    family: str
    q: int
    elements: np.ndarray
    cell_dofs: np.ndarray
    n_dofs: int

    def gather(self, vec: np.ndarray) -> np.ndarray:
        """Global vector -> per-element coefficient array (removed dofs are zero)."""
        ext = np.append(np.asarray(vec, dtype=float), 0.0)
        return ext[self.cell_dofs]

    def scatter_matrix_rows(self):
        return self.cell_dofs

    def assemble_vector(self, local: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_dofs + 1)
        np.add.at(out, self.cell_dofs, local)
        return out[:-1]

    def from_broken(self, coeffs: np.ndarray, check_tol: float | None = None) -> np.ndarray:
        """Read global coefficients from a broken array (averaging shared copies)."""
        s = np.zeros(self.n_dofs + 1)
        c = np.zeros(self.n_dofs + 1)
        np.add.at(s, self.cell_dofs, coeffs)
        np.add.at(c, self.cell_dofs, 1.0)
        out = s[:-1] / np.maximum(c[:-1], 1)
        if check_tol is not None:
            # shared copies must agree and removed (essential) dofs must vanish
            jump = np.abs(np.where(self.cell_dofs >= 0, self.gather(out) - coeffs, coeffs)).max()
            if jump > check_tol:
                raise ValueError(f"broken field is not conforming (max dof mismatch {jump:.2e})")
        return out


def _global_entity_ids(mesh: TetMesh, family: str, q: int, elements):
    ne, nf, ni = entity_counts(family, q)
    kind, ent, off = local_entity_slices(family, q)
    els = np.asarray(elements)
    nloc = len(kind)
    gid = np.empty((len(els), nloc), dtype=np.int64)
    edge_base = 0
    face_base = mesh.n_edges * ne
    int_base = face_base + mesh.n_faces * nf
    m = kind == 0
    gid[:, m] = edge_base + mesh.tet_edges[els][:, ent[m]] * ne + off[m]
    m = kind == 1
    gid[:, m] = face_base + mesh.tet_faces[els][:, ent[m]] * nf + off[m]
    m = kind == 2
    gid[:, m] = int_base + els[:, None] * ni + off[m]
    return gid, kind, ent


def _compress(gid, removed_mask):
    """Renumber the used ids consecutively; removed -> -1."""
    used = np.unique(gid[~removed_mask])
    lookup = {g: i for i, g in enumerate(used.tolist())}
    out = np.full(gid.shape, -1, dtype=np.int64)
    flat = gid.ravel()
    mflat = removed_mask.ravel()
    res = out.ravel()
    res[~mflat] = np.searchsorted(used, flat[~mflat])
    return res.reshape(gid.shape), len(lookup)


def global_dofmap(mesh: TetMesh, family: str, q: int, bc: bool = True) -> DofMap:
    """Numbering of ND_q or RT_q conforming fields; ``bc`` removes DOFs on Neumann faces."""
    key = ("global_dofmap", family, q, bc)
    cache = mesh.__dict__.setdefault("_dof_cache", {})
    if key in cache:
        return cache[key]
    els = np.arange(mesh.n_tets)
    gid, kind, ent = _global_entity_ids(mesh, family, q, els)
    removed = np.zeros(gid.shape, dtype=bool)
    if bc:
        nface = mesh.face_tag[mesh.tet_faces] == NEUMANN  # (nK, 4)
        m = kind == 1
        removed[:, m] |= nface[:, ent[m]]
        if family == "ND":
            nedges = mesh.boundary_edges.get(NEUMANN, set())
            if nedges:
                emask = np.isin(mesh.tet_edges, np.fromiter(nedges, dtype=np.int64))
                m = kind == 0
                removed[:, m] |= emask[:, ent[m]]
    cd, n = _compress(gid, removed)
    dm = DofMap(family, q, els, cd, n)
    cache[key] = dm
    return dm


def patch_dofmap(mesh: TetMesh, patch: VertexPatch, family: str, q: int) -> DofMap:
    """Numbering of ND_q(T_a) / RT_q(T_a) with essential conditions on the patch boundary.

    DOFs on faces of ``patch.essential_faces`` (and, for ND, on their edges) are removed.
    """
    key = ("patch_dofmap", patch.vertex, family, q)
    cache = mesh.__dict__.setdefault("_dof_cache", {})
    if key in cache:
        return cache[key]
    els = np.asarray(patch.elements)
    gid, kind, ent = _global_entity_ids(mesh, family, q, els)
    ess_faces = np.fromiter(patch.essential_faces, dtype=np.int64) if patch.essential_faces else np.zeros(0, np.int64)
    fmask = np.isin(mesh.tet_faces[els], ess_faces)
    removed = np.zeros(gid.shape, dtype=bool)
    m = kind == 1
    removed[:, m] |= fmask[:, ent[m]]
    if family == "ND" and len(ess_faces):
        ess_edges = essential_edges(mesh, ess_faces)
        emask = np.isin(mesh.tet_edges[els], ess_edges)
        m = kind == 0
        removed[:, m] |= emask[:, ent[m]]
    cd, n = _compress(gid, removed)
    dm = DofMap(family, q, els, cd, n)
    cache[key] = dm
    return dm


def essential_edges(mesh: TetMesh, faces) -> np.ndarray:
    faces = np.asarray(list(faces), dtype=np.int64)
    if not len(faces):
        return np.zeros(0, np.int64)
    verts = mesh.faces[faces]
    idx = mesh.edge_index
    out = set()
    for a, b, c in verts.tolist():
        out.update((idx[(a, b)], idx[(a, c)], idx[(b, c)]))
    return np.array(sorted(out), dtype=np.int64)


def face_dof_rows(family: str, q: int, local_face: int) -> np.ndarray:
    """Local DOF indices attached to one local face (RT: normal moments)."""
    kind, ent, _ = local_entity_slices(family, q)
    return np.flatnonzero((kind == 1) & (ent == local_face))


def boundary_dof_rows(family: str, q: int) -> np.ndarray:
    kind, _, _ = local_entity_slices(family, q)
    return np.flatnonzero(kind != 2)
