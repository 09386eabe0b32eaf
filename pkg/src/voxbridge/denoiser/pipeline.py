"""Volume-level inference: single denoiser evaluations and full synthesis."""
from __future__ import annotations

import numpy as np

from ..diffusion import make_schedule, sample
from ..geometry.cortex import ConditionSet
from ..geometry.volume import Volume
from .condition import ConditioningSpec
from .tensor import Tensor
from .train import TrainState
from .unet import UNet

__all__ = ["denoise_volume", "ema_network", "synthesize"]


def denoise_volume(net: UNet, cond_spec: ConditioningSpec, x_t: Volume,
                   cond: ConditionSet, t: int) -> Volume:
    """One denoiser evaluation on a Volume; returns the noise-part estimate."""
    cond.s_c.require_same_geometry(x_t, "bridge state and conditions")
    inp = cond_spec.assemble(np.asarray(x_t.data, dtype=np.float32), cond)
    out = net(Tensor(inp), int(t))
    return x_t.with_data(out.data[0, 0])


def ema_network(state: TrainState) -> UNet:
    """Fresh network carrying the EMA parameter set."""
    net = UNet(state.net.config, seed=state.train_config.seed)
    for name, p in net.named_parameters():
        p.data = state.ema[name].copy()
    return net


def synthesize(state: TrainState, cond: ConditionSet, n_steps: int = 10,
               use_ema: bool = True) -> Volume:
    """Run the reverse bridge from the fused-SDF endpoint to an image.

    Deterministic subsequence sampling with n_steps evaluations of the
    (EMA by default) denoiser; returns the synthesized volume on the
    condition grid.
    """
    spec = state.cond_spec
    net = ema_network(state) if use_ema else state.net
    sched = make_schedule(state.train_config.T)
    endpoint = spec.endpoint(cond)
    aux = spec.aux_array(cond)

    def predict(x: np.ndarray, s: int) -> np.ndarray:
        inp = np.concatenate([x[None, None].astype(np.float32, copy=False),
                              aux[None]], axis=1)
        return net(Tensor(inp), int(s)).data[0, 0]

    out = sample(predict, endpoint, sched, n_steps)
    return out if isinstance(out, Volume) else cond.s_c.with_data(out)
