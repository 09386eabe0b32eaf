"""Channel assembly and normalization between geometry and the network.

The network consumes [current bridge state; active auxiliary channels] in
a fixed order. Signed-distance channels (the fused endpoint included) are
clipped to a truncation radius and scaled to [-1, 1]; binary channels
pass through. The resolved truncation radius travels with checkpoints so
synthesis always normalizes exactly like training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry.cortex import AUX_CHANNELS, ConditionSet
from ..geometry.volume import Volume

__all__ = ["ConditioningSpec", "SDF_CLIP_SPACINGS"]

SDF_CLIP_SPACINGS = 4.0  # truncation radius in multiples of the finest voxel edge

_SDF_AUX = ("s_p", "s_w")


@dataclass(frozen=True)
class ConditioningSpec:
    active_aux: tuple = AUX_CHANNELS
    sdf_clip: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "active_aux", tuple(self.active_aux))
        for name in self.active_aux:
            if name not in AUX_CHANNELS:
                raise ValueError(f"unknown auxiliary channel {name!r}")
        canonical = [a for a in AUX_CHANNELS if a in self.active_aux]
        if list(self.active_aux) != canonical:
            raise ValueError(
                f"active_aux must follow canonical order {AUX_CHANNELS}")
        if not self.sdf_clip > 0:
            raise ValueError(f"sdf_clip must be positive, got {self.sdf_clip}")

    @classmethod
    def for_grid(cls, spacing, active_aux=AUX_CHANNELS) -> "ConditioningSpec":
        return cls(active_aux, SDF_CLIP_SPACINGS * float(min(spacing)))

    @property
    def in_channels(self) -> int:
        return 1 + len(self.active_aux)

    def normalize_sdf(self, data: np.ndarray) -> np.ndarray:
        return np.clip(data / self.sdf_clip, -1.0, 1.0)

    def endpoint(self, cond: ConditionSet) -> Volume:
        """Normalized fused SDF, the fixed end of the bridge."""
        vol = cond.s_c
        return vol.with_data(self.normalize_sdf(vol.data))

    def _check_compatible(self, cond: ConditionSet):
        missing = [a for a in self.active_aux if a not in cond.active_aux]
        if missing:
            raise ValueError(
                f"condition set lacks active channels {missing}")

    def aux_array(self, cond: ConditionSet) -> np.ndarray:
        """Active auxiliary channels stacked as (len(active_aux), H, W, D)."""
        self._check_compatible(cond)
        chans = []
        for name in self.active_aux:
            data = cond.volume(name).data
            if name in _SDF_AUX:
                data = self.normalize_sdf(data)
            chans.append(np.asarray(data, dtype=np.float32))
        if not chans:
            return np.zeros((0,) + cond.s_c.dims, dtype=np.float32)
        return np.stack(chans, axis=0)

    def assemble(self, x_t: np.ndarray, cond: ConditionSet) -> np.ndarray:
        """Network input (B, in_channels, H, W, D) from batched bridge states."""
        x_t = np.asarray(x_t, dtype=np.float32)
        if x_t.ndim == 3:
            x_t = x_t[None]
        if x_t.ndim != 4 or x_t.shape[1:] != cond.s_c.dims:
            raise ValueError(
                f"bridge state shape {x_t.shape} does not match condition "
                f"grid {cond.s_c.dims}")
        aux = self.aux_array(cond)
        b = x_t.shape[0]
        return np.concatenate(
            [x_t[:, None], np.broadcast_to(aux[None], (b,) + aux.shape)], axis=1)

    def to_dict(self) -> dict:
        return {"active_aux": list(self.active_aux),
                "sdf_clip": float(self.sdf_clip)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningSpec":
        return cls(tuple(d["active_aux"]), float(d["sdf_clip"]))
