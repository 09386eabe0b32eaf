"""Point-to-mesh distance queries.

Exact closest-point-on-triangle tests under an axis-aligned BVH, with
angle-weighted pseudonormals for the inside/outside decision on closed
meshes. A plain-numpy brute-force twin is kept for oracle testing; both
routes must agree exactly.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

from .mesh import TriMesh, face_normals, require_closed, validate_mesh, vertex_normals

__all__ = ["MeshDistanceQuery", "signed_distance", "brute_force_closest"]

# closest-feature codes
FEAT_FACE = 0
FEAT_VERT_A = 1
FEAT_VERT_B = 2
FEAT_VERT_C = 3
FEAT_EDGE_AB = 4
FEAT_EDGE_BC = 5
FEAT_EDGE_CA = 6

_LEAF_SIZE = 8


# ---------------------------------------------------------------------------
# BVH construction (numpy; stable median splits so builds are reproducible)

def _build_bvh(tri_min, tri_max, centroids):
    n = len(centroids)
    perm = np.arange(n)
    node_min, node_max = [], []
    node_left, node_right = [], []
    node_start, node_count = [], []

    def build(start, end):
        nid = len(node_min)
        idx = perm[start:end]
        node_min.append(tri_min[idx].min(axis=0))
        node_max.append(tri_max[idx].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(start)
        node_count.append(end - start)
        if end - start > _LEAF_SIZE:
            cen = centroids[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            order = np.argsort(cen[:, axis], kind="stable")
            perm[start:end] = idx[order]
            mid = start + (end - start) // 2
            node_count[nid] = 0
            node_left[nid] = build(start, mid)
            node_right[nid] = build(mid, end)
        return nid

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000))
    try:
        build(0, n)
    finally:
        sys.setrecursionlimit(old_limit)
    return (
        np.array(node_min),
        np.array(node_max),
        np.array(node_left, dtype=np.int64),
        np.array(node_right, dtype=np.int64),
        np.array(node_start, dtype=np.int64),
        np.array(node_count, dtype=np.int64),
        perm,
    )


# ---------------------------------------------------------------------------
# Scalar closest-point test (Ericson's region walk), jitted

@njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, FEAT_VERT_A
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, FEAT_VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, FEAT_EDGE_AB
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, FEAT_VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, FEAT_EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz), FEAT_EDGE_BC
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (
        ax + abx * v + acx * w,
        ay + aby * v + acy * w,
        az + abz * v + acz * w,
        FEAT_FACE,
    )


@njit(cache=True, parallel=True)
def _bvh_query(points, va, vb, vc, node_min, node_max, node_left, node_right,
               node_start, node_count, tri_id):
    n = points.shape[0]
    out_d2 = np.empty(n, dtype=np.float64)
    out_pt = np.empty((n, 3), dtype=np.float64)
    out_tri = np.empty(n, dtype=np.int64)
    out_feat = np.empty(n, dtype=np.int64)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bx = by = bz = 0.0
        btri = -1
        bfeat = 0
        stack = np.empty(128, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # squared distance to the node box
            dx = max(node_min[node, 0] - px, 0.0, px - node_max[node, 0])
            dy = max(node_min[node, 1] - py, 0.0, py - node_max[node, 1])
            dz = max(node_min[node, 2] - pz, 0.0, pz - node_max[node, 2])
            if dx * dx + dy * dy + dz * dz >= best:
                continue
            left = node_left[node]
            if left < 0:
                s = node_start[node]
                for j in range(s, s + node_count[node]):
                    qx, qy, qz, feat = _closest_on_triangle(
                        px, py, pz,
                        va[j, 0], va[j, 1], va[j, 2],
                        vb[j, 0], vb[j, 1], vb[j, 2],
                        vc[j, 0], vc[j, 1], vc[j, 2],
                    )
                    ddx, ddy, ddz = px - qx, py - qy, pz - qz
                    d2 = ddx * ddx + ddy * ddy + ddz * ddz
                    if d2 < best:
                        best = d2
                        bx, by, bz = qx, qy, qz
                        btri = tri_id[j]
                        bfeat = feat
            else:
                right = node_right[node]
                # visit the nearer child first (pushed last)
                ldx = max(node_min[left, 0] - px, 0.0, px - node_max[left, 0])
                ldy = max(node_min[left, 1] - py, 0.0, py - node_max[left, 1])
                ldz = max(node_min[left, 2] - pz, 0.0, pz - node_max[left, 2])
                rdx = max(node_min[right, 0] - px, 0.0, px - node_max[right, 0])
                rdy = max(node_min[right, 1] - py, 0.0, py - node_max[right, 1])
                rdz = max(node_min[right, 2] - pz, 0.0, pz - node_max[right, 2])
                dl = ldx * ldx + ldy * ldy + ldz * ldz
                dr = rdx * rdx + rdy * rdy + rdz * rdz
                if dl <= dr:
                    stack[sp] = right
                    sp += 1
                    stack[sp] = left
                    sp += 1
                else:
                    stack[sp] = left
                    sp += 1
                    stack[sp] = right
                    sp += 1
        out_d2[i] = best
        out_pt[i, 0] = bx
        out_pt[i, 1] = by
        out_pt[i, 2] = bz
        out_tri[i] = btri
        out_feat[i] = bfeat
    return out_d2, out_pt, out_tri, out_feat


# ---------------------------------------------------------------------------

class MeshDistanceQuery:
    """Reusable accelerated distance structure for one mesh.

    signed=True additionally validates closedness and prepares the
    pseudonormal tables used for the inside/outside test.
    """

    def __init__(self, mesh: TriMesh, signed: bool = False):
        if signed:
            require_closed(mesh)
        else:
            validate_mesh(mesh)
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        tris = v[f]  # (F, 3, 3)
        tri_min = tris.min(axis=1)
        tri_max = tris.max(axis=1)
        centroids = tris.mean(axis=1)
        (self._nmin, self._nmax, self._nleft, self._nright,
         self._nstart, self._ncount, perm) = _build_bvh(
            tri_min, tri_max, centroids
        )
        self._va = np.ascontiguousarray(tris[perm, 0])
        self._vb = np.ascontiguousarray(tris[perm, 1])
        self._vc = np.ascontiguousarray(tris[perm, 2])
        self._tri_id = perm.astype(np.int64)
        self._signed = signed
        if signed:
            self._face_n = face_normals(mesh)
            self._vert_n = vertex_normals(mesh)
            self._edge_n, self._face_edge = _edge_pseudonormals(mesh, self._face_n)

    def query(self, points: np.ndarray):
        """Unsigned query. Returns (distance, closest_point, tri, feature)."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d2, cp, tri, feat = _bvh_query(
            pts, self._va, self._vb, self._vc,
            self._nmin, self._nmax, self._nleft, self._nright,
            self._nstart, self._ncount, self._tri_id,
        )
        return np.sqrt(d2), cp, tri, feat

    def unsigned(self, points: np.ndarray) -> np.ndarray:
        return self.query(points)[0]

    def signed(self, points: np.ndarray) -> np.ndarray:
        """Signed distances, negative inside (closed meshes only)."""
        if not self._signed:
            raise ValueError("query structure was built without sign support")
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d, cp, tri, feat = self.query(pts)
        normals = self._pseudonormal(tri, feat)
        dots = np.einsum("ij,ij->i", pts - cp, normals)
        sd = np.where(dots >= 0.0, d, -d)
        sd[d == 0.0] = 0.0
        return sd

    def _pseudonormal(self, tri, feat):
        faces = self.mesh.faces
        n = np.empty((len(tri), 3))
        is_face = feat == FEAT_FACE
        n[is_face] = self._face_n[tri[is_face]]
        for code, corner in ((FEAT_VERT_A, 0), (FEAT_VERT_B, 1), (FEAT_VERT_C, 2)):
            m = feat == code
            if np.any(m):
                n[m] = self._vert_n[faces[tri[m], corner]]
        for code, slot in ((FEAT_EDGE_AB, 0), (FEAT_EDGE_BC, 1), (FEAT_EDGE_CA, 2)):
            m = feat == code
            if np.any(m):
                n[m] = self._edge_n[self._face_edge[tri[m], slot]]
        return n


def _edge_pseudonormals(mesh: TriMesh, face_n: np.ndarray):
    f = mesh.faces
    nf = len(f)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    und = np.sort(directed, axis=1)
    uniq, inverse = np.unique(und, axis=0, return_inverse=True)
    acc = np.zeros((len(uniq), 3))
    np.add.at(acc, inverse, face_n[np.tile(np.arange(nf), 3)])
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    edge_n = acc / norms
    face_edge = inverse.reshape(3, nf).T.copy()  # slots [AB, BC, CA]
    return edge_n, face_edge


def signed_distance(mesh: TriMesh, p) -> float:
    """Signed distance from one point to a closed mesh (negative inside)."""
    q = MeshDistanceQuery(mesh, signed=True)
    return float(q.signed(np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Brute-force twin (vectorized over faces, one point at a time). Used as an
# independent oracle; intentionally free of BVH and numba.

def brute_force_closest(mesh: TriMesh, points: np.ndarray):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v, f = mesh.vertices, mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    ab, ac = b - a, c - a
    dist = np.empty(len(pts))
    closest = np.empty((len(pts), 3))
    tri = np.empty(len(pts), dtype=np.int64)
    for i, p in enumerate(pts):
        ap = p - a
        d1 = np.einsum("ij,ij->i", ab, ap)
        d2 = np.einsum("ij,ij->i", ac, ap)
        bp = p - b
        d3 = np.einsum("ij,ij->i", ab, bp)
        d4 = np.einsum("ij,ij->i", ac, bp)
        cp = p - c
        d5 = np.einsum("ij,ij->i", ab, cp)
        d6 = np.einsum("ij,ij->i", ac, cp)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        vv = vb / denom
        ww = vc / denom
        cand = a + ab * vv[:, None] + ac * ww[:, None]
        # region overrides, applied in the same priority order as the
        # scalar walk
        t_bc = np.clip((d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0,
                                            (d4 - d3) + (d5 - d6)), 0, 1)
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        cand = np.where(on_bc[:, None], b + (c - b) * t_bc[:, None], cand)
        t_ca = np.clip(d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0, 1)
        on_ca = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        cand = np.where(on_ca[:, None], a + ac * t_ca[:, None], cand)
        on_c = (d6 >= 0) & (d5 <= d6)
        cand = np.where(on_c[:, None], c, cand)
        t_ab = np.clip(d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0, 1)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        cand = np.where(on_ab[:, None], a + ab * t_ab[:, None], cand)
        on_b = (d3 >= 0) & (d4 <= d3)
        cand = np.where(on_b[:, None], b, cand)
        on_a = (d1 <= 0) & (d2 <= 0)
        cand = np.where(on_a[:, None], a, cand)
        d2_all = np.einsum("ij,ij->i", p - cand, p - cand)
        j = int(np.argmin(d2_all))
        dist[i] = np.sqrt(d2_all[j])
        closest[i] = cand[j]
        tri[i] = j
    return dist, closest, tri
