"""Cortical surface to voxel synthesis with Brownian bridge diffusion."""

__version__ = "0.1.0"
