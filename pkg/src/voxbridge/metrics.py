"""Image fidelity metrics: PSNR, uniform-window SSIM, multi-reference SSIM."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry.volume import Volume
from .seeds import stream

__all__ = [
    "MetricReport",
    "psnr",
    "ssim",
    "mr_ssim",
    "evaluate_pair",
    "SSIM_WINDOW",
    "SSIM_K1",
    "SSIM_K2",
]

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    data_range: float
    ssim_map: np.ndarray | None = None


def _pair(a, b):
    if isinstance(a, Volume) and isinstance(b, Volume):
        a.require_same_geometry(b, "metric inputs")
        return (np.asarray(a.data, dtype=np.float64),
                np.asarray(b.data, dtype=np.float64))
    x = np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, Volume) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _resolve_range(reference: np.ndarray, data_range) -> float:
    if data_range is None:
        data_range = float(reference.max() - reference.min())
    data_range = float(data_range)
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    return data_range


def psnr(a, b, data_range=None) -> float:
    """Peak signal-to-noise ratio in dB; b is the reference for the
    default data range. Identical inputs give +inf."""
    x, y = _pair(a, b)
    data_range = _resolve_range(y, data_range)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1,
         k2: float = SSIM_K2, data_range=None, return_map: bool = False):
    """Mean structural similarity over all fully-inside uniform windows.

    Variances and covariance use the unbiased sample form. With the
    default data range taken from b, the score is not symmetric in its
    arguments; pass data_range explicitly for a symmetric comparison.
    """
    x, y = _pair(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if window > min(x.shape):
        raise ValueError(
            f"window {window} exceeds smallest dimension of {x.shape}")
    data_range = _resolve_range(y, data_range)
    np_win = window ** x.ndim
    cov_norm = np_win / (np_win - 1) if np_win > 1 else 0.0

    def mean_filter(v):
        return uniform_filter(v, size=window, mode="constant", cval=0.0)

    ux = mean_filter(x)
    uy = mean_filter(y)
    uxx = mean_filter(x * x)
    uyy = mean_filter(y * y)
    uxy = mean_filter(x * y)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    cxy = cov_norm * (uxy - ux * uy)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2))
    half = window // 2
    valid = tuple(slice(half, n - half) for n in x.shape)
    smap = smap[valid]
    value = float(np.mean(smap))
    if return_map:
        return value, smap
    return value


def _content_digest(vol) -> bytes:
    h = hashlib.sha256()
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    h.update(np.ascontiguousarray(data, dtype=np.float64).tobytes())
    if isinstance(vol, Volume):
        h.update(np.asarray(vol.spacing, dtype=np.float64).tobytes())
        h.update(np.asarray(vol.origin, dtype=np.float64).tobytes())
    return h.digest()


def mr_ssim(generated, references, n_refs: int, seed: int = 0,
            window: int = SSIM_WINDOW, k1: float = SSIM_K1,
            k2: float = SSIM_K2, data_range=None) -> float:
    """Mean SSIM against a seeded, replacement-free reference draw.

    References are put into a canonical order (by content digest) before
    drawing, so the score depends on the reference multiset and the seed
    but not on list order. Each pair defaults to that reference's range.
    """
    references = list(references)
    if n_refs < 1:
        raise ValueError("n_refs must be at least 1")
    if len(references) < n_refs:
        raise ValueError(
            f"need at least {n_refs} references, got {len(references)}")
    order = sorted(range(len(references)),
                   key=lambda i: _content_digest(references[i]))
    rng = stream(seed, "mr-ssim-refs")
    picks = rng.choice(len(references), size=n_refs, replace=False)
    values = [ssim(generated, references[order[i]], window, k1, k2, data_range)
              for i in picks]
    return float(np.mean(values))


def evaluate_pair(generated, reference, window: int = SSIM_WINDOW,
                  k1: float = SSIM_K1, k2: float = SSIM_K2,
                  data_range=None, with_map: bool = False) -> MetricReport:
    x, y = _pair(generated, reference)
    rng_val = _resolve_range(y, data_range)
    if with_map:
        s, smap = ssim(generated, reference, window, k1, k2, rng_val, True)
    else:
        s, smap = ssim(generated, reference, window, k1, k2, rng_val), None
    return MetricReport(psnr=psnr(generated, reference, rng_val),
                        ssim=s, data_range=rng_val, ssim_map=smap)
