"""Indexed triangle meshes: I/O, validation, normals, derived surfaces."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TriMesh",
    "MeshFormatError",
    "MeshTopologyError",
    "load_mesh",
    "save_mesh",
    "validate_mesh",
    "require_closed",
    "face_normals",
    "face_areas",
    "vertex_normals",
    "midthickness",
    "icosphere",
]


class MeshFormatError(ValueError):
    pass


class MeshTopologyError(ValueError):
    pass


@dataclass
class TriMesh:
    """Triangle surface with optional per-vertex thickness channel.

    Meshes belonging to one population share vertex count and face
    connectivity, giving vertex-wise correspondence.
    """

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    thickness: np.ndarray | None = None  # (V,) float64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.thickness is not None:
            self.thickness = np.ascontiguousarray(self.thickness, dtype=np.float64)
            if self.thickness.shape != (len(self.vertices),):
                raise ValueError("thickness must have one value per vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def same_connectivity(self, other: "TriMesh") -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(
            self.faces, other.faces
        )

    def require_correspondence(self, other: "TriMesh"):
        if not self.same_connectivity(other):
            raise ValueError(
                "meshes are not in correspondence (vertex count or "
                "connectivity differs)"
            )

    def content_key(self) -> bytes:
        """Stable byte digest of geometry + connectivity."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.digest()


def validate_mesh(mesh: TriMesh, min_area: float = 0.0):
    """Check index ranges and triangle non-degeneracy.

    Closedness is only required when a mesh is used for signed distance;
    see require_closed.
    """
    v, f = mesh.vertices, mesh.faces
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise MeshFormatError(
            f"face index out of range (valid 0..{len(v) - 1}, "
            f"found {f.min()}..{f.max()})"
        )
    same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if np.any(same):
        raise MeshTopologyError(
            f"degenerate face with repeated vertex at face {int(np.argmax(same))}"
        )
    areas = face_areas(mesh)
    if np.any(areas <= min_area):
        raise MeshTopologyError(
            f"zero-area face at index {int(np.argmin(areas))}"
        )
    # every undirected edge in at most 2 faces, and directed edges unique
    # (orientability); boundary edges are allowed here
    edges = _directed_edges(f)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 1):
        bad = uniq[np.argmax(counts > 1)]
        raise MeshTopologyError(
            f"non-manifold or inconsistently oriented edge {tuple(bad)}"
        )


def require_closed(mesh: TriMesh):
    """Raise unless every edge is shared by exactly two opposite-oriented faces."""
    validate_mesh(mesh)
    edges = _directed_edges(mesh.faces)
    und = np.sort(edges, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    open_edges = uniq[counts != 2]
    if len(open_edges):
        e = open_edges[0]
        raise MeshTopologyError(
            f"mesh is not closed: edge {tuple(e)} lies on a boundary "
            f"({len(open_edges)} such edges)"
        )


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    if normalize:
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        n = n / norms
    return n


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalize=False), axis=1)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Angle-weighted vertex normals (unit length).

    Each incident face contributes its unit normal weighted by the interior
    angle at the vertex; robust on irregular triangulations.
    """
    v, f = mesh.vertices, mesh.faces
    fn = face_normals(mesh)
    out = np.zeros_like(v)
    corners = v[f]  # (F, 3, 3)
    for k in range(3):
        p = corners[:, k]
        e1 = corners[:, (k + 1) % 3] - p
        e2 = corners[:, (k + 2) % 3] - p
        n1 = np.linalg.norm(e1, axis=1)
        n2 = np.linalg.norm(e2, axis=1)
        cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(n1 * n2, 1e-300)
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(out, f[:, k], fn * ang[:, None])
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return out / norms


def midthickness(m_p: TriMesh, m_w: TriMesh) -> TriMesh:
    """Vertex-wise average surface of a corresponding pial/white pair."""
    m_p.require_correspondence(m_w)
    return TriMesh((m_p.vertices + m_w.vertices) / 2.0, m_p.faces.copy())


# ---------------------------------------------------------------------------
# OBJ subset I/O: `v x y z` and `f i j k` lines, 1-based indices, triangles
# only. Optional `.thick` sidecar: one real per vertex.

def load_mesh(path) -> TriMesh:
    vertices = []
    faces = []
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: vertex line needs 3 coordinates"
                    )
                try:
                    vertices.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise MeshFormatError(
                        f"{path}:{lineno}: malformed vertex coordinate"
                    ) from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                try:
                    idx = [int(x) for x in parts[1:]]
                except ValueError:
                    raise MeshFormatError(
                        f"{path}:{lineno}: malformed face index"
                    ) from None
                for i in idx:
                    if i < 1:
                        raise MeshFormatError(
                            f"{path}:{lineno}: face index {i} out of range "
                            f"(indices are 1-based)"
                        )
                faces.append([i - 1 for i in idx])
            else:
                raise MeshFormatError(
                    f"{path}:{lineno}: unsupported line type {parts[0]!r}"
                )
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices")
    mesh = TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if mesh.faces.size and mesh.faces.max() >= mesh.n_vertices:
        raise MeshFormatError(
            f"{path}: face index {mesh.faces.max() + 1} out of range "
            f"(only {mesh.n_vertices} vertices)"
        )
    validate_mesh(mesh)
    thick_path = _sidecar_path(path)
    if os.path.exists(thick_path):
        thick = np.loadtxt(thick_path, dtype=np.float64, ndmin=1)
        if thick.shape != (mesh.n_vertices,):
            raise MeshFormatError(
                f"{thick_path}: expected {mesh.n_vertices} values, got {thick.shape}"
            )
        mesh.thickness = thick
    return mesh


def save_mesh(path, mesh: TriMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")
    if mesh.thickness is not None:
        with open(_sidecar_path(path), "w") as f:
            for t in mesh.thickness:
                f.write(f"{t:.17g}\n")


def _sidecar_path(path):
    base, _ = os.path.splitext(str(path))
    return base + ".thick"


# ---------------------------------------------------------------------------
# Icosphere construction (deterministic vertex/face ordering).

_ICO_T = (1.0 + 5.0 ** 0.5) / 2.0

_ICO_VERTS = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=np.float64,
)

_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Unit icosahedron subdivided `subdivisions` times, projected to a sphere.

    Vertex ordering is deterministic, so all icospheres at one subdivision
    level share connectivity (the correspondence contract).
    """
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        cache: dict = {}
        new_faces = []

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                m = m / np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))
