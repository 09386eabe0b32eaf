"""Denoiser training: adaptive-moment optimizer, EMA, plateau decay.

Every random draw comes from a stream named by (seed, purpose, counter),
so a fixed TrainConfig.seed fixes the whole run, and resuming from a
saved state at an epoch boundary continues the exact same sequence the
uninterrupted run would have produced.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..diffusion import forward_sample, loss_target, make_schedule
from ..geometry.cortex import ConditionSet
from ..geometry.volume import Volume
from ..seeds import stream
from . import tensor as T
from .condition import ConditioningSpec
from .tensor import Tensor
from .unet import DenoiserConfig, UNet

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainState", "train", "evaluate_loss"]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_MIN_IMPROVEMENT = 1e-4
PLATEAU_PATIENCE = 10  # epochs without improvement before the rate drops


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    plateau_factor: float = 0.5
    batch_size: int = 2
    ema_rate: float = 0.995
    T: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "learning_rate", "plateau_factor",
                     "batch_size", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.ema_rate < 1.0:
            raise ValueError(f"ema_rate must lie in (0, 1), got {self.ema_rate}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "plateau_factor": self.plateau_factor,
            "batch_size": self.batch_size,
            "ema_rate": self.ema_rate,
            "T": self.T,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    """Everything needed to continue or use a training run."""

    net: UNet
    train_config: TrainConfig
    cond_spec: ConditioningSpec
    ema: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    epoch: int = 0
    lr: float = 0.0
    best_monitor: float = float("inf")
    plateau_wait: int = 0
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)

    @classmethod
    def fresh(cls, dcfg: DenoiserConfig, tcfg: TrainConfig,
              cond_spec: ConditioningSpec) -> "TrainState":
        net = UNet(dcfg, seed=tcfg.seed)
        params = dict(net.named_parameters())
        return cls(
            net=net,
            train_config=tcfg,
            cond_spec=cond_spec,
            ema={n: p.data.copy() for n, p in params.items()},
            adam_m={n: np.zeros_like(p.data) for n, p in params.items()},
            adam_v={n: np.zeros_like(p.data) for n, p in params.items()},
            lr=tcfg.learning_rate,
        )


def _dataset_arrays(dataset, cond_spec: ConditioningSpec):
    """Per-sample (x0, endpoint, aux) float32 arrays, geometry checked."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    ref = dataset[0][0].s_c
    out = []
    for cond, x0 in dataset:
        if not isinstance(cond, ConditionSet) or not isinstance(x0, Volume):
            raise TypeError("dataset items must be (ConditionSet, Volume) pairs")
        ref.require_same_geometry(cond.s_c, "dataset condition grids")
        ref.require_same_geometry(x0, "dataset target volumes")
        out.append((
            np.asarray(x0.data, dtype=np.float32),
            np.asarray(cond_spec.endpoint(cond).data, dtype=np.float32),
            cond_spec.aux_array(cond),
        ))
    return out


def _batch_forward(net, samples, idx, t_batch, eps_batch, sched):
    """Build (input, target) arrays for one batch and run the network."""
    xs, targets = [], []
    for j, i in enumerate(idx):
        x0, ep, aux = samples[i]
        x_t = forward_sample(x0, ep, int(t_batch[j]), eps_batch[j], sched)
        tgt = loss_target(x0, ep, int(t_batch[j]), eps_batch[j], sched)
        xs.append(np.concatenate([x_t[None], aux], axis=0))
        targets.append(tgt[None])
    inp = Tensor(np.stack(xs, axis=0))
    target = Tensor(np.stack(targets, axis=0).astype(np.float32))
    pred = net(inp, t_batch)
    return T.tmean(T.tabs(pred - target))


def evaluate_loss(state: TrainState, dataset, draws=None) -> float:
    """Mean regression loss over a dataset with fixed corruption draws.

    draws defaults to a stream keyed only by the seed, so every epoch
    scores against identical (t, eps) pairs and losses are comparable.
    """
    tcfg = state.train_config
    samples = _dataset_arrays(dataset, state.cond_spec)
    sched = make_schedule(tcfg.T)
    if draws is None:
        g = stream(tcfg.seed, "validation-draws")
        n = len(samples)
        draws = (g.integers(1, tcfg.T + 1, size=n),
                 g.standard_normal((n,) + samples[0][0].shape,
                                   dtype=np.float32))
    t_all, eps_all = draws
    total = 0.0
    bs = tcfg.batch_size
    for lo in range(0, len(samples), bs):
        idx = range(lo, min(lo + bs, len(samples)))
        loss = _batch_forward(state.net, samples, idx,
                              np.asarray(t_all[lo:lo + bs]),
                              eps_all[lo:lo + bs], sched)
        total += float(loss.data) * len(idx)
    return total / len(samples)


def train(dataset, dcfg: DenoiserConfig, tcfg: TrainConfig,
          cond_spec: ConditioningSpec | None = None,
          val_dataset=None, state: TrainState | None = None,
          progress=None) -> TrainState:
    """Fit the denoiser; returns state with per-epoch loss curve.

    Pass a previously returned (or loaded) state to continue training up
    to tcfg.epochs. The plateau rule watches the validation loss when
    val_dataset is given, the training epoch loss otherwise: no
    improvement beyond PLATEAU_MIN_IMPROVEMENT for PLATEAU_PATIENCE
    epochs halves the learning rate (by plateau_factor).
    """
    if cond_spec is None:
        cond_spec = (state.cond_spec if state is not None else
                     ConditioningSpec.for_grid(dataset[0][0].s_c.spacing))
    if cond_spec.in_channels != dcfg.in_channels:
        raise ValueError(
            f"conditioning yields {cond_spec.in_channels} input channels "
            f"but the network expects {dcfg.in_channels}")
    samples = _dataset_arrays(dataset, cond_spec)
    sched = make_schedule(tcfg.T)
    if state is None:
        state = TrainState.fresh(dcfg, tcfg, cond_spec)
    else:
        if state.net.config.to_dict() != dcfg.to_dict():
            raise ValueError("resumed state was built for a different network")
        state.train_config = tcfg  # the passed config governs continuation
    params = dict(state.net.named_parameters())
    if set(params) != set(state.ema):
        raise ValueError("state parameter names do not match the network")
    val_draws = None
    if val_dataset is not None:
        g = stream(tcfg.seed, "validation-draws")
        n = len(val_dataset)
        val_draws = (g.integers(1, tcfg.T + 1, size=n),
                     g.standard_normal((n,) + samples[0][0].shape,
                                       dtype=np.float32))
    n = len(samples)
    bs = min(tcfg.batch_size, n)
    for epoch in range(state.epoch, tcfg.epochs):
        order = stream(tcfg.seed, "epoch-order", epoch).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            g = stream(tcfg.seed, "train-step", state.step)
            t_batch = g.integers(1, tcfg.T + 1, size=len(idx))
            eps_batch = g.standard_normal(
                (len(idx),) + samples[0][0].shape, dtype=np.float32)
            loss = _batch_forward(state.net, samples, idx, t_batch,
                                  eps_batch, sched)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"non-finite training loss {loss_val} at epoch {epoch} "
                    f"step {state.step} (lr={state.lr:g}, t={t_batch.tolist()})")
            loss.backward()
            state.step += 1
            _adam_step(state, params)
            state.net.zero_grad()
            epoch_loss += loss_val * len(idx)
        epoch_loss /= n
        state.loss_curve.append(epoch_loss)
        if val_dataset is not None:
            monitor = evaluate_loss(state, val_dataset, val_draws)
            state.val_curve.append(monitor)
        else:
            monitor = epoch_loss
        if state.best_monitor - monitor > PLATEAU_MIN_IMPROVEMENT:
            state.best_monitor = monitor
            state.plateau_wait = 0
        else:
            state.plateau_wait += 1
            if state.plateau_wait >= PLATEAU_PATIENCE:
                state.lr *= tcfg.plateau_factor
                state.plateau_wait = 0
                logger.info("plateau at epoch %d: learning rate -> %g",
                            epoch, state.lr)
        state.epoch = epoch + 1
        if progress is not None:
            progress(state)
    return state


def _adam_step(state: TrainState, params):
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    t = state.step  # already incremented; first step sees t=1
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    r = state.train_config.ema_rate
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)
        e = state.ema[name]
        e *= r
        e += (1.0 - r) * p.data
