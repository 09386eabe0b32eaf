"""Iso-surface extraction on Volume grids (marching cubes plumbing)."""
from __future__ import annotations

import numpy as np
from skimage import measure

from .mesh import TriMesh
from .volume import Volume

__all__ = ["extract_isosurface"]


def extract_isosurface(vol: Volume, level: float,
                       fill_mask: np.ndarray | None = None,
                       fill_value: float = 0.0) -> TriMesh:
    """Triangulated level surface of a scalar volume in world coordinates.

    fill_mask marks voxels to overwrite with fill_value before extraction;
    used to suppress crossings on the wrong side of a known boundary (for
    example, masking everything outside the pial surface to the ribbon
    level before pulling out the white-matter surface).
    """
    data = np.asarray(vol.data, dtype=np.float64)
    if fill_mask is not None:
        data = data.copy()
        data[fill_mask] = fill_value
    lo, hi = data.min(), data.max()
    if not (lo < level < hi):
        raise ValueError(
            f"level {level} outside data range [{lo:.4g}, {hi:.4g}]")
    verts, faces, _, _ = measure.marching_cubes(
        data, level=level, spacing=vol.spacing)
    verts = verts + np.asarray(vol.origin)
    return TriMesh(verts.astype(np.float64), faces.astype(np.int64))
