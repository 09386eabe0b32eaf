"""Cortex-specific geometry: SDF grids, fusion, thickness, atrophy, ASSD."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..seeds import stream
from .closest import MeshDistanceQuery
from .mesh import TriMesh, face_areas, vertex_normals
from .volume import Volume

logger = logging.getLogger(__name__)

__all__ = [
    "ConditionSet",
    "AUX_CHANNELS",
    "sample_sdf_grid",
    "fuse_cortex_sdf",
    "edge_map",
    "default_edge_tau",
    "build_condition_set",
    "cortical_thickness",
    "simulate_atrophy",
    "sample_surface_points",
    "assd",
]

# canonical auxiliary channel order; also the network input order
AUX_CHANNELS = ("s_p", "s_w", "edge", "ribbon")

ATROPHY_STEP = 0.05  # mm per iteration; also the white-surface clearance margin


@dataclass
class ConditionSet:
    """Fused cortex SDF plus auxiliary channels on one grid."""

    s_c: Volume
    s_p: Volume
    s_w: Volume
    edge: Volume
    ribbon: Volume
    active_aux: tuple = AUX_CHANNELS

    def __post_init__(self):
        self.active_aux = tuple(self.active_aux)
        for name in self.active_aux:
            if name not in AUX_CHANNELS:
                raise ValueError(f"unknown auxiliary channel {name!r}")
        if list(self.active_aux) != [a for a in AUX_CHANNELS if a in self.active_aux]:
            raise ValueError(f"active_aux must follow canonical order {AUX_CHANNELS}")
        for name in ("s_p", "s_w", "edge", "ribbon"):
            self.s_c.require_same_geometry(getattr(self, name), "condition channels")
        for name in ("edge", "ribbon"):
            vals = np.unique(getattr(self, name).data)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError(f"{name} must be binary, found values {vals[:5]}")
        if np.any(self.s_c.data[self.ribbon.data == 1.0] != 0.0):
            raise ValueError("fused SDF must vanish on the ribbon")

    def volume(self, name: str) -> Volume:
        return getattr(self, name)

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for name in ("s_c", "s_p", "s_w", "edge", "ribbon"):
            h.update(np.ascontiguousarray(
                self.volume(name).data, dtype=np.float32).tobytes())
        h.update(",".join(self.active_aux).encode())
        return h.hexdigest()


def sample_sdf_grid(mesh: TriMesh, dims, spacing, origin) -> Volume:
    """Signed distance of every voxel center to a closed mesh."""
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    ref = Volume(np.zeros(dims, dtype=np.float32), spacing, origin)
    query = MeshDistanceQuery(mesh, signed=True)
    sd = query.signed(ref.voxel_centers())
    return ref.with_data(sd.reshape(dims).astype(np.float32))


def fuse_cortex_sdf(s_p: Volume, s_w: Volume):
    """Region-fused cortex SDF and ribbon mask.

    Per voxel: both strictly positive -> pial distance; both non-positive ->
    white distance; opposite signs -> zero, with the ribbon mask set. Zeros
    count as inside, putting boundary voxels into the ribbon.
    """
    s_p.require_same_geometry(s_w, "SDF inputs")
    p, w = s_p.data, s_w.data
    in_p = p <= 0.0
    in_w = w <= 0.0
    s_c = np.where(~in_p & ~in_w, p, np.where(in_p & in_w, w, 0.0))
    ribbon = (in_p != in_w).astype(p.dtype)
    return s_p.with_data(s_c.astype(p.dtype)), s_p.with_data(ribbon)


def default_edge_tau(spacing) -> float:
    return 0.5 * float(min(spacing))


def edge_map(s_p: Volume, s_w: Volume, tau: float | None = None) -> Volume:
    """Binary shell where either surface passes within tau of a voxel center."""
    s_p.require_same_geometry(s_w, "SDF inputs")
    if tau is None:
        tau = default_edge_tau(s_p.spacing)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    edge = (np.abs(s_p.data) < tau) | (np.abs(s_w.data) < tau)
    return s_p.with_data(edge.astype(s_p.data.dtype))


def build_condition_set(m_p: TriMesh, m_w: TriMesh, dims, spacing, origin,
                        tau: float | None = None,
                        active_aux=AUX_CHANNELS) -> ConditionSet:
    s_p = sample_sdf_grid(m_p, dims, spacing, origin)
    s_w = sample_sdf_grid(m_w, dims, spacing, origin)
    s_c, ribbon = fuse_cortex_sdf(s_p, s_w)
    edge = edge_map(s_p, s_w, tau)
    return ConditionSet(s_c, s_p, s_w, edge, ribbon, active_aux)


def cortical_thickness(m_p: TriMesh, m_w: TriMesh) -> np.ndarray:
    """Per-vertex bidirectional vertex-to-surface thickness."""
    m_p.require_correspondence(m_w)
    q_w = MeshDistanceQuery(m_w)
    q_p = MeshDistanceQuery(m_p)
    d_pw = q_w.unsigned(m_p.vertices)
    d_wp = q_p.unsigned(m_w.vertices)
    return 0.5 * (d_pw + d_wp)


def simulate_atrophy(m_p: TriMesh, m_w: TriMesh, delta: float,
                     region_mask: np.ndarray | None = None,
                     step: float = ATROPHY_STEP) -> TriMesh:
    """Thin the cortex by moving pial vertices inward along vertex normals.

    Vertices advance in increments of `step` (final increment shortened to
    land on `delta` exactly), with normals recomputed on the deformed mesh
    every iteration. A vertex stops early if another increment would bring
    it within `step` of the white surface, so every moved vertex keeps that
    much clearance. The white mesh is untouched.
    """
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    m_p.require_correspondence(m_w)
    if region_mask is None:
        mask = np.ones(m_p.n_vertices, dtype=bool)
    else:
        region_mask = np.asarray(region_mask)
        if region_mask.shape != (m_p.n_vertices,):
            raise ValueError("region mask must have one entry per vertex")
        mask = region_mask.astype(bool)
    out = TriMesh(m_p.vertices.copy(), m_p.faces.copy(),
                  None if m_p.thickness is None else m_p.thickness.copy())
    if delta == 0 or not mask.any():
        return out
    sdf_w = MeshDistanceQuery(m_w, signed=True)
    remaining = np.where(mask, float(delta), 0.0)
    active = remaining > 0
    clamped = np.zeros(m_p.n_vertices, dtype=bool)
    while active.any():
        normals = vertex_normals(out)
        ids = np.nonzero(active)[0]
        inc = np.minimum(step, remaining[ids])
        candidate = out.vertices[ids] - normals[ids] * inc[:, None]
        ok = sdf_w.signed(candidate) > step  # keep clearance outside white
        moved = ids[ok]
        out.vertices[moved] = candidate[ok]
        remaining[moved] -= inc[ok]
        stopped = ids[~ok]
        clamped[stopped] = True
        remaining[stopped] = 0.0
        active = remaining > 0
    if clamped.all() or (mask.any() and clamped[mask].all()):
        warnings.warn(
            f"atrophy delta={delta} clamped every vertex in the region "
            f"against the white surface", RuntimeWarning, stacklevel=2)
    elif clamped.any():
        logger.debug("atrophy clamped %d of %d vertices",
                     int(clamped.sum()), int(mask.sum()))
    return out


def _mesh_sample_stream(seed, mesh: TriMesh):
    # content-addressed so each mesh gets the same points regardless of
    # argument order; makes assd exactly symmetric
    return stream(seed, "surface-points", mesh.content_key().hex())


def sample_surface_points(mesh: TriMesh, n_points: int, rng) -> np.ndarray:
    """Uniform area-weighted surface samples."""
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    probs = areas / total
    faces = rng.choice(len(areas), size=n_points, p=probs)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[faces]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
        + v[:, None] * (tri[:, 2] - tri[:, 0])


def assd(s_hat: TriMesh, s: TriMesh, n_points: int = 100_000, seed: int = 0) -> float:
    """Average symmetric surface distance from sampled points.

    Equal point counts are drawn on both meshes (area-weighted), each point
    is measured against the opposite surface, and all distances are pooled.
    """
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    pts_hat = sample_surface_points(s_hat, n_points, _mesh_sample_stream(seed, s_hat))
    pts_ref = sample_surface_points(s, n_points, _mesh_sample_stream(seed, s))
    d_hat = MeshDistanceQuery(s).unsigned(pts_hat)
    d_ref = MeshDistanceQuery(s_hat).unsigned(pts_ref)
    # pairwise sums for order-independent reduction
    return float((fsum_pairwise(d_hat) + fsum_pairwise(d_ref)) / (len(d_hat) + len(d_ref)))


def fsum_pairwise(x: np.ndarray) -> float:
    # np.sum already reduces pairwise over a contiguous f64 buffer, which is
    # deterministic for a fixed length
    return float(np.sum(np.ascontiguousarray(x, dtype=np.float64)))
