"""Brownian bridge diffusion: schedule, corruption, reverse steps, sampling.

The bridge runs between an image x_0 and a shape condition x_T with
marginal mean (1 - a_t) x_0 + a_t x_T and variance d_t = 2 (a_t - a_t^2),
a_t = t / T. All schedule arrays are precomputed in double precision;
per-voxel work follows the dtype of its inputs (float32 in the pipeline).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry.volume import Volume

__all__ = [
    "BridgeSchedule",
    "make_schedule",
    "forward_sample",
    "loss_target",
    "l1_loss",
    "reverse_step",
    "step_coefficients",
    "ddim_timesteps",
    "sample",
    "schedule_rows",
]


@dataclass(frozen=True)
class BridgeSchedule:
    """Precomputed bridge coefficients for t = 0..T.

    Per-step arrays (index t >= 1) describe the reverse transition from t
    to t-1: x_{t-1} = c_xt x_t + c_st x_T - c_ft f + sqrt(delta_tilde) eps.
    Entry 0 of those arrays is unused and holds NaN.
    """

    T: int
    alpha: np.ndarray
    delta: np.ndarray
    delta_cond: np.ndarray
    c_xt: np.ndarray
    c_st: np.ndarray
    c_ft: np.ndarray
    delta_tilde: np.ndarray


def make_schedule(T: int) -> BridgeSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    alpha = t / T
    delta = 2.0 * (alpha - alpha ** 2)

    nan = np.full(T + 1, np.nan)
    delta_cond = nan.copy()
    c_xt = nan.copy()
    c_st = nan.copy()
    c_ft = nan.copy()
    delta_tilde = nan.copy()
    for s in range(1, T + 1):
        cx, cs, cf, var, dcond = step_coefficients(alpha, delta, T, s, s - 1)
        delta_cond[s] = dcond
        c_xt[s] = cx
        c_st[s] = cs
        c_ft[s] = cf
        delta_tilde[s] = var
    # the final reverse step (t=1) is deterministic: delta_0 = 0
    delta_tilde[1] = 0.0
    return BridgeSchedule(T, alpha, delta, delta_cond, c_xt, c_st, c_ft, delta_tilde)


def step_coefficients(alpha: np.ndarray, delta: np.ndarray, T: int,
                      s: int, s_prev: int):
    """Reverse-transition coefficients for a (possibly non-consecutive) pair.

    Returns (c_x, c_s, c_f, posterior_variance, conditional_variance) for
    the step s -> s_prev, s_prev < s. The variance entries are those of the
    exact posterior; deterministic subsequence sampling ignores them.

    At s = T both delta_T and 1 - alpha_T vanish and the generic ratios are
    0/0; the exact posterior there is the marginal at s_prev, which fixes
    the limit values used below.
    """
    if not 0 <= s_prev < s <= T:
        raise ValueError(f"invalid step pair ({s} -> {s_prev}) for T={T}")
    # python floats so downstream arithmetic never promotes float32 arrays
    a_s, a_p = float(alpha[s]), float(alpha[s_prev])
    d_s, d_p = float(delta[s]), float(delta[s_prev])
    if s == T:
        return 1.0, 0.0, 1.0 - a_p, d_p, 0.0
    d_cond = d_s - d_p * (1.0 - a_s) ** 2 / (1.0 - a_p) ** 2
    c_x = (d_p / d_s) * (1.0 - a_s) / (1.0 - a_p) + (d_cond / d_s) * (1.0 - a_p)
    c_s = a_p - a_s * (1.0 - a_s) / (1.0 - a_p) * (d_p / d_s)
    c_f = (1.0 - a_p) * d_cond / d_s
    var = d_cond * d_p / d_s
    return c_x, c_s, c_f, var, d_cond


def _as_array(x):
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _wrap_like(template, data):
    if isinstance(template, Volume):
        return template.with_data(data)
    return data


def _check_geometry(*vols):
    ref = None
    for v in vols:
        if isinstance(v, Volume):
            if ref is None:
                ref = v
            else:
                ref.require_same_geometry(v, "bridge volumes")
    arrays = [_as_array(v) for v in vols]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"mismatched shapes {sorted(shapes)}")
    return arrays


def forward_sample(x0, xT, t: int, eps, sched: BridgeSchedule):
    """Corrupt x0 toward xT at timestep t: (1-a_t) x0 + a_t xT + sqrt(d_t) eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    a0, aT, e = _check_geometry(x0, xT, eps)
    if t == 0:  # endpoints are pinned bitwise
        return _wrap_like(x0, a0.copy())
    if t == sched.T:
        return _wrap_like(x0, aT.copy())
    a = float(sched.alpha[t])
    s = float(np.sqrt(sched.delta[t]))
    return _wrap_like(x0, (1.0 - a) * a0 + a * aT + s * e)


def loss_target(x0, xT, t: int, eps, sched: BridgeSchedule):
    """Regression target for the denoiser: a_t (xT - x0) + sqrt(d_t) eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    a0, aT, e = _check_geometry(x0, xT, eps)
    a = float(sched.alpha[t])
    s = float(np.sqrt(sched.delta[t]))
    return _wrap_like(x0, a * (aT - a0) + s * e)


def l1_loss(pred, target) -> float:
    p, q = _check_geometry(pred, target)
    return float(np.mean(np.abs(p.astype(np.float64) - q.astype(np.float64))))


def reverse_step(x_t, f_pred, s_c, t: int, eps, sched: BridgeSchedule):
    """One stochastic reverse transition t -> t-1.

    eps must be zero (or None) at t=1; the last step is deterministic.
    """
    if t < 1 or t > sched.T:
        raise ValueError(f"reverse step needs 1 <= t <= {sched.T}, got {t}")
    if eps is None:
        arrays = _check_geometry(x_t, f_pred, s_c)
        xt, f, sc = arrays
        e = None
    else:
        xt, f, sc, e = _check_geometry(x_t, f_pred, s_c, eps)
    if t == 1 and e is not None and np.any(e != 0):
        raise ValueError("the t=1 reverse step is deterministic; eps must be zero")
    out = (float(sched.c_xt[t]) * xt + float(sched.c_st[t]) * sc
           - float(sched.c_ft[t]) * f)
    if e is not None and t > 1:
        out = out + float(np.sqrt(sched.delta_tilde[t])) * e
    return _wrap_like(x_t, out)


def ddim_timesteps(T: int, n_steps: int) -> list:
    """Evenly spaced decreasing timestep subsequence starting at T.

    The final entry maps to 0 during sampling; n_steps = T recovers the
    full chain T..1.
    """
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    steps = [int(round(T * (n_steps - i) / n_steps)) for i in range(n_steps)]
    if steps[0] != T or any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise RuntimeError(f"degenerate timestep subsequence {steps}")
    return steps


def sample(predict, endpoint, sched: BridgeSchedule, n_steps: int,
           seed: int | None = None):
    """Deterministic (eta = 0) subsequence sampling from the bridge endpoint.

    predict(x_t, t) must return the denoiser estimate of the noise part at
    timestep t. The endpoint is x_T (the shape condition, in whatever
    normalization the predictor was trained with). The seed argument is
    accepted for interface uniformity; the eta = 0 path draws no noise.
    """
    steps = ddim_timesteps(sched.T, n_steps)
    ep = _as_array(endpoint)
    x = ep.copy()
    for i, s in enumerate(steps):
        s_prev = steps[i + 1] if i + 1 < len(steps) else 0
        c_x, c_s, c_f, _, _ = step_coefficients(
            sched.alpha, sched.delta, sched.T, s, s_prev)
        f = predict(x, s)
        x = c_x * x + c_s * ep - c_f * f
    return _wrap_like(endpoint, x)


def schedule_rows(sched: BridgeSchedule):
    """Schedule as plain rows for CSV export; per-step columns blank at t=0."""
    rows = []
    for t in range(sched.T + 1):
        if t == 0:
            rows.append((0, 0.0, 0.0, None, None, None, None, None))
        else:
            rows.append((
                t, float(sched.alpha[t]), float(sched.delta[t]),
                float(sched.delta_cond[t]), float(sched.c_xt[t]),
                float(sched.c_st[t]), float(sched.c_ft[t]),
                float(sched.delta_tilde[t]),
            ))
    return rows
