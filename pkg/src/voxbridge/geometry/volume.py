"""Dense scalar 3D grids with world-space metadata and binary I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Volume", "save_volume", "load_volume", "VolumeFormatError"]

MAGIC = b"C2VX"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    """Scalar grid over a regular lattice.

    The grid is node-centered: the world position of voxel (i, j, k) is
    origin + (i, j, k) * spacing, and `origin` is the center of voxel
    (0, 0, 0). `data` has shape (H, W, D), C-order.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have 3 entries")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def require_same_geometry(self, other: "Volume", what: str = "volumes"):
        if not self.same_geometry(other):
            raise ValueError(
                f"{what} must share dims/spacing/origin: "
                f"{self.dims}/{self.spacing}/{self.origin} vs "
                f"{other.dims}/{other.spacing}/{other.origin}"
            )

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (H*W*D, 3), C-order."""
        h, w, d = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(h), np.arange(w), np.arange(d), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)


def save_volume(path, vol: Volume):
    data = np.ascontiguousarray(vol.data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    h, w, d = vol.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<3I", h, w, d))
        f.write(struct.pack("<3d", *vol.spacing))
        f.write(struct.pack("<3d", *vol.origin))
        f.write(struct.pack("<B", _DTYPE_F32))
        f.write(data.tobytes(order="C"))


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise VolumeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise VolumeFormatError(f"unsupported format version {version}")
        h, w, d = struct.unpack("<3I", f.read(12))
        spacing = struct.unpack("<3d", f.read(24))
        origin = struct.unpack("<3d", f.read(24))
        (dtype_tag,) = struct.unpack("<B", f.read(1))
        if dtype_tag != _DTYPE_F32:
            raise VolumeFormatError(f"unknown dtype tag {dtype_tag}")
        payload = f.read()
    expected = h * w * d * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length {len(payload)} does not match dims {(h, w, d)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d).copy()
    return Volume(data, spacing, origin)
