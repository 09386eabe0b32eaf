"""Synthetic cortex-like test data.

A phantom is a pair of nested, bumpy spheres (inner white-analog, outer
pial-analog) sharing icosphere connectivity, plus a piecewise-constant
intensity volume with a smooth multiplicative bias and additive Gaussian
noise. Bumps come from seeded low-order spherical harmonics, so a
population of phantoms gives a meaningful shape distribution with exact
correspondence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import lpmv

from .geometry.cortex import fuse_cortex_sdf, sample_sdf_grid
from .geometry.mesh import TriMesh, icosphere
from .geometry.volume import Volume
from .seeds import stream

__all__ = ["PhantomSpec", "generate", "population_specs", "BUMP_MAX_DEGREE"]

BUMP_MAX_DEGREE = 4


@dataclass(frozen=True)
class PhantomSpec:
    inner_radius: float = 3.2
    outer_radius: float = 4.2
    bump_amplitude: float = 0.25
    thickness_amplitude: float = 0.15
    levels: tuple = (0.0, 0.7, 1.0)  # background, interior, ribbon
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.1
    bias_wavelength: float = 12.0  # mm; larger is smoother
    dims: tuple = (32, 32, 32)
    spacing: tuple = (0.33, 0.33, 0.33)
    subdivisions: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing",
                           tuple(float(s) for s in self.spacing))
        if not 0 < self.inner_radius < self.outer_radius:
            raise ValueError("radii must satisfy 0 < inner < outer")
        if len(self.levels) != 3 or len(set(self.levels)) != 3:
            raise ValueError("levels must be 3 distinct intensities")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise and bias amplitudes must be non-negative")
        if self.bias_wavelength <= 0:
            raise ValueError("bias wavelength must be positive")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("grid dims/spacing must be positive")

    def to_dict(self) -> dict:
        return {
            "inner_radius": self.inner_radius,
            "outer_radius": self.outer_radius,
            "bump_amplitude": self.bump_amplitude,
            "thickness_amplitude": self.thickness_amplitude,
            "levels": list(self.levels),
            "noise_sigma": self.noise_sigma,
            "bias_amplitude": self.bias_amplitude,
            "bias_wavelength": self.bias_wavelength,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "subdivisions": self.subdivisions,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for name in ("levels", "dims", "spacing"):
            d[name] = tuple(d[name])
        return cls(**d)


def _real_sh_basis(units: np.ndarray, max_degree: int) -> np.ndarray:
    """Real spherical harmonics (degree 1..max_degree) at unit vectors.

    Returns (n_functions, n_points); constant l=0 is excluded since the
    radius parameters already set the mean.
    """
    x, y, z = units[:, 0], units[:, 1], units[:, 2]
    ct = np.clip(z, -1.0, 1.0)
    phi = np.arctan2(y, x)
    rows = []
    for l in range(1, max_degree + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            norm = math.sqrt((2 * l + 1) / (4 * math.pi)
                             * math.factorial(l - am) / math.factorial(l + am))
            leg = lpmv(am, l, ct)
            if m > 0:
                rows.append(norm * math.sqrt(2.0) * np.cos(am * phi) * leg)
            elif m < 0:
                rows.append(norm * math.sqrt(2.0) * np.sin(am * phi) * leg)
            else:
                rows.append(norm * leg)
    return np.stack(rows, axis=0)


def _bump_field(units: np.ndarray, rng, amplitude: float) -> np.ndarray:
    """Smooth random field on the sphere with max |value| = amplitude."""
    basis = _real_sh_basis(units, BUMP_MAX_DEGREE)
    degrees = np.concatenate(
        [np.full(2 * l + 1, l) for l in range(1, BUMP_MAX_DEGREE + 1)])
    coeffs = rng.standard_normal(basis.shape[0]) / (1.0 + degrees)
    raw = coeffs @ basis
    peak = float(np.abs(raw).max())
    if peak < 1e-12 or amplitude == 0.0:
        return np.zeros(units.shape[0])
    return raw * (amplitude / peak)


def generate(spec: PhantomSpec):
    """Build one phantom: (white mesh, pial mesh, intensity volume)."""
    base = icosphere(spec.subdivisions)
    units = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    g_bump = stream(spec.seed, "phantom-bumps")
    shape_bumps = _bump_field(units, g_bump, spec.bump_amplitude)
    gap_bumps = _bump_field(units, g_bump, spec.thickness_amplitude)
    r_w = spec.inner_radius + shape_bumps
    r_p = spec.outer_radius + shape_bumps + gap_bumps
    if np.any(r_w <= 0):
        raise ValueError("bumps drove the inner surface through the origin")
    if np.any(r_p <= r_w):
        raise ValueError("bumps made the outer surface touch the inner one")
    m_w = TriMesh(units * r_w[:, None], base.faces.copy())
    m_p = TriMesh(units * r_p[:, None], base.faces.copy())

    s_p = sample_sdf_grid(m_p, spec.dims, spec.spacing, _centered_origin(spec))
    s_w = sample_sdf_grid(m_w, spec.dims, spec.spacing, _centered_origin(spec))
    _, ribbon = fuse_cortex_sdf(s_p, s_w)
    bg, wm, gm = spec.levels
    inside_w = s_w.data <= 0.0
    clean = np.where(ribbon.data == 1.0, gm, np.where(inside_w, wm, bg))

    centers = s_p.voxel_centers().reshape(spec.dims + (3,))
    g_bias = stream(spec.seed, "phantom-bias")
    direction = g_bias.standard_normal(3)
    direction /= np.linalg.norm(direction)
    phase = g_bias.uniform(0.0, 2.0 * np.pi)
    wave = np.cos(2.0 * np.pi * (centers @ direction) / spec.bias_wavelength
                  + phase)
    bias = 1.0 + spec.bias_amplitude * wave

    g_noise = stream(spec.seed, "phantom-noise")
    noise = g_noise.standard_normal(spec.dims)
    image = (clean * bias + spec.noise_sigma * noise).astype(np.float32)
    return m_w, m_p, s_p.with_data(image)


def _centered_origin(spec: PhantomSpec):
    return tuple(-(d - 1) * s / 2.0 for d, s in zip(spec.dims, spec.spacing))


def population_specs(base: PhantomSpec, n: int):
    """n spec variants differing only in their derived per-case seeds."""
    if n < 1:
        raise ValueError("population size must be at least 1")
    out = []
    for i in range(n):
        g = stream(base.seed, "phantom-case", i)
        out.append(replace(base, seed=int(g.integers(2 ** 63))))
    return out
