"""Linear shape statistics over corresponding cortex samples.

Each sample is a midthickness mesh in vertexwise correspondence with a
per-vertex thickness map. Samples flatten to [all x, all y, all z, all
thickness] vectors; a principal-component model over the population
supports embedding, reconstruction, spherical latent interpolation,
Mahalanobis scoring, and outlier rejection.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .geometry.mesh import TriMesh

logger = logging.getLogger(__name__)

__all__ = [
    "PcaModel",
    "LatentPoint",
    "PcaFormatError",
    "flatten_sample",
    "unflatten_sample",
    "pca_fit",
    "embed",
    "invert",
    "slerp_sample",
    "mahalanobis",
    "outlier_filter",
    "save_pca",
    "load_pca",
]

FLATTENING_TAG = "xyzt-v1"  # [all x, all y, all z, all thickness]

# variance this far below the leading component counts as numerically zero
_VAR_FLOOR_REL = 1e-10

_SLERP_MIN_ANGLE = 1e-6


class PcaFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray          # (4V,)
    basis: np.ndarray         # (k, 4V), orthonormal rows
    variances: np.ndarray     # (k,), nonincreasing
    faces: np.ndarray         # reference topology (F, 3)
    flattening: str = FLATTENING_TAG
    total_variance: float = float("nan")  # fit-time only; not serialized

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=np.float64))
        object.__setattr__(self, "variances",
                           np.asarray(self.variances, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        if self.mean.ndim != 1 or self.mean.size % 4:
            raise ValueError("mean must flatten 4 fields per vertex")
        k, dim = self.basis.shape
        if dim != self.mean.size or self.variances.shape != (k,):
            raise ValueError("basis/variances dimensions inconsistent with mean")
        if np.any(self.variances < 0) or np.any(np.diff(self.variances) > 0):
            raise ValueError("variances must be nonnegative and nonincreasing")
        if self.flattening != FLATTENING_TAG:
            raise ValueError(f"unknown flattening order {self.flattening!r}")

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 4

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def explained_variance_ratio(self):
        """Per-component share of total population variance; None after
        loading from file (the total is known only at fit time)."""
        if not np.isfinite(self.total_variance):
            return None
        if self.total_variance == 0:
            return np.zeros(self.k)
        return self.variances / self.total_variance


@dataclass(frozen=True)
class LatentPoint:
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "e", np.asarray(self.e, dtype=np.float64))
        if self.e.ndim != 1 or not np.all(np.isfinite(self.e)):
            raise ValueError("latent scores must be a finite vector")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.e))


def _scores(e) -> np.ndarray:
    arr = e.e if isinstance(e, LatentPoint) else np.asarray(e, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("latent scores must be a vector")
    return arr


def flatten_sample(mesh: TriMesh) -> np.ndarray:
    if mesh.thickness is None:
        raise ValueError("shape samples need a thickness map")
    v = mesh.vertices
    return np.concatenate([v[:, 0], v[:, 1], v[:, 2], mesh.thickness])


def unflatten_sample(vec: np.ndarray, faces: np.ndarray) -> TriMesh:
    vec = np.asarray(vec, dtype=np.float64)
    nv = vec.size // 4
    if vec.size != 4 * nv:
        raise ValueError(f"flattened length {vec.size} not divisible by 4")
    verts = np.stack([vec[:nv], vec[nv:2 * nv], vec[2 * nv:3 * nv]], axis=1)
    return TriMesh(verts, faces, vec[3 * nv:])


def _check_sample(model_or_ref, mesh: TriMesh):
    faces, nv = model_or_ref
    if mesh.n_vertices != nv:
        raise ValueError(
            f"sample has {mesh.n_vertices} vertices, model expects {nv}")
    if not np.array_equal(mesh.faces, faces):
        raise ValueError("sample topology differs from the model reference")


def pca_fit(samples, k: int) -> PcaModel:
    """Principal components of the flattened population via thin SVD."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to fit")
    ref = samples[0]
    for m in samples[1:]:
        ref.require_correspondence(m)
    rows = [flatten_sample(m) for m in samples]
    x = np.stack(rows, axis=0)
    n, dim = x.shape
    k_max = min(n - 1, dim)
    if not 1 <= k <= k_max:
        raise ValueError(f"k must lie in [1, {k_max}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    variances = s ** 2 / (n - 1)
    total = float(variances.sum())
    basis = vt[:k].copy()
    # sign convention: the largest-magnitude entry of each row is positive
    idx = np.argmax(np.abs(basis), axis=1)
    flips = basis[np.arange(k), idx] < 0
    basis[flips] *= -1.0
    model = PcaModel(mean, basis, variances[:k], ref.faces.copy(),
                     total_variance=total)
    ratio = model.explained_variance_ratio
    logger.info("shape model: %d samples, %d/%d components, "
                "%.2f%% variance explained", n, k, k_max,
                100.0 * float(ratio.sum()))
    return model


def embed(model: PcaModel, sample: TriMesh) -> LatentPoint:
    _check_sample((model.faces, model.n_vertices), sample)
    return LatentPoint(model.basis @ (flatten_sample(sample) - model.mean))


def invert(model: PcaModel, e) -> TriMesh:
    scores = _scores(e)
    if scores.size != model.k:
        raise ValueError(f"expected {model.k} scores, got {scores.size}")
    return unflatten_sample(model.mean + model.basis.T @ scores,
                            model.faces.copy())


def slerp_sample(e1, e2, phi: float, symmetric_radius: bool = False) -> LatentPoint:
    """Great-circle interpolation of latent directions at fixed radius.

    Directions follow the sphere geodesic between e1/|e1| and e2/|e2|;
    the radius stays |e1| (or blends linearly between the two radii with
    symmetric_radius). Near-parallel inputs return the e1 endpoint; the
    antipodal direction pair has no unique path and raises.
    """
    a = _scores(e1)
    b = _scores(e2)
    if a.shape != b.shape:
        raise ValueError(f"latent dimensions differ: {a.size} vs {b.size}")
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp endpoints must be nonzero")
    radius = (1.0 - phi) * na + phi * nb if symmetric_radius else na
    if phi == 0.0:
        return LatentPoint(a.copy() * (radius / na))
    ua = a / na
    ub = b / nb
    beta = float(np.arccos(np.clip(ua @ ub, -1.0, 1.0)))
    if beta < _SLERP_MIN_ANGLE:
        return LatentPoint(ua * radius)
    if beta > np.pi - _SLERP_MIN_ANGLE:
        raise ValueError("antipodal latent directions have no unique path")
    w1 = np.sin((1.0 - phi) * beta) / np.sin(beta)
    w2 = np.sin(phi * beta) / np.sin(beta)
    return LatentPoint(radius * (w1 * ua + w2 * ub))


def mahalanobis(model: PcaModel, e) -> float:
    """Latent distance to the population mean in standard-deviation units.

    Components with numerically zero variance are excluded rather than
    divided by.
    """
    scores = _scores(e)
    if scores.size != model.k:
        raise ValueError(f"expected {model.k} scores, got {scores.size}")
    var = model.variances
    if var.size == 0:
        return 0.0
    keep = var > _VAR_FLOOR_REL * float(var.max())
    if not keep.any():
        return 0.0
    return float(np.sqrt(np.sum(scores[keep] ** 2 / var[keep])))


def outlier_filter(model: PcaModel, samples, per_component_threshold: float):
    """Split samples into (retained, dropped indices) by latent magnitude.

    A sample is dropped when any latent score exceeds the threshold in
    absolute value.
    """
    retained, dropped = [], []
    for i, sample in enumerate(samples):
        scores = embed(model, sample).e
        if np.any(np.abs(scores) > per_component_threshold):
            dropped.append(i)
        else:
            retained.append(sample)
    if dropped:
        logger.info("outlier filter dropped %d of %d samples: %s",
                    len(dropped), len(dropped) + len(retained), dropped)
    return retained, dropped


# ---------------------------------------------------------------------------
# model file IO

_MAGIC = b"C2PC"
_VERSION = 1


def save_pca(path, model: PcaModel):
    tag = model.flattening.encode("utf-8")
    faces = np.ascontiguousarray(model.faces, dtype=np.int64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<II", model.n_vertices, model.k))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.variances, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.basis, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", faces.shape[0]))
        fh.write(faces.astype("<i8").tobytes())


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise PcaFormatError(f"truncated model file while reading {what}")
    return buf


def load_pca(path) -> PcaModel:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != _MAGIC:
            raise PcaFormatError(f"{path}: not a shape model file")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != _VERSION:
            raise PcaFormatError(f"{path}: unsupported version {version}")
        nv, k = struct.unpack("<II", _read(fh, 8, "dimensions"))
        (tag_len,) = struct.unpack("<I", _read(fh, 4, "tag length"))
        tag = _read(fh, tag_len, "flattening tag").decode("utf-8")
        mean = np.frombuffer(_read(fh, 8 * 4 * nv, "mean"), dtype="<f8").copy()
        variances = np.frombuffer(_read(fh, 8 * k, "variances"), dtype="<f8").copy()
        basis = np.frombuffer(
            _read(fh, 8 * k * 4 * nv, "basis"), dtype="<f8").reshape(k, 4 * nv).copy()
        (nf,) = struct.unpack("<I", _read(fh, 4, "face count"))
        faces = np.frombuffer(
            _read(fh, 8 * 3 * nf, "faces"), dtype="<i8").reshape(nf, 3).copy()
        if fh.read(1):
            raise PcaFormatError(f"{path}: trailing bytes")
    try:
        return PcaModel(mean, variances=variances, basis=basis, faces=faces,
                        flattening=tag)
    except ValueError as exc:
        raise PcaFormatError(f"{path}: {exc}") from None
