import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxbridge.diffusion import (
    ddim_timesteps,
    forward_sample,
    l1_loss,
    loss_target,
    make_schedule,
    reverse_step,
    sample,
    schedule_rows,
    step_coefficients,
)
from voxbridge.geometry import Volume
from voxbridge.seeds import stream


def test_schedule_exact_values():
    for T in (4, 10, 1000):
        s = make_schedule(T)
        t = np.arange(T + 1)
        assert np.array_equal(s.alpha, t / T)
        assert s.delta[0] == 0.0 and s.delta[T] == 0.0
        if T % 2 == 0:
            assert s.delta[T // 2] == 0.5
        # t/T is not exact binary for general t, so symmetry holds to 1 ulp
        assert np.allclose(s.delta, s.delta[::-1], rtol=0, atol=1e-15)
        assert np.all(s.delta[1:-1] > 0)


def test_schedule_t4_hand_table():
    s = make_schedule(4)
    assert np.allclose(s.alpha, [0, 0.25, 0.5, 0.75, 1.0], atol=0)
    assert np.allclose(s.delta, [0, 0.375, 0.5, 0.375, 0], atol=0)
    # hand-derived consecutive-step coefficients at t=2
    assert abs(s.c_xt[2] - 1.0) < 1e-12
    assert abs(s.c_st[2] - 0.0) < 1e-12
    assert abs(s.c_ft[2] - 0.5) < 1e-12
    assert abs(s.delta_tilde[2] - 0.25) < 1e-12
    # and t=3: delta_{3|2} = 1/4, c_ft = 1/3, delta_tilde = 1/3
    assert abs(s.delta_cond[3] - 0.25) < 1e-12
    assert abs(s.c_ft[3] - 1.0 / 3.0) < 1e-12
    assert abs(s.delta_tilde[3] - 1.0 / 3.0) < 1e-12


def test_schedule_t_equals_T_limit():
    # the 0/0 limit at t=T resolves to (1, 0, 1 - alpha_{T-1}); the pinned
    # endpoint makes the forward conditional variance 0 while the posterior
    # of x_{T-1} given x_T is the full marginal delta_{T-1}
    for T in (4, 10, 50):
        s = make_schedule(T)
        assert abs(s.c_xt[T] - 1.0) < 1e-12
        assert abs(s.c_st[T] - 0.0) < 1e-12
        assert abs(s.c_ft[T] - (1.0 - s.alpha[T - 1])) < 1e-12
        assert s.delta_cond[T] == 0.0
        assert abs(s.delta_tilde[T] - s.delta[T - 1]) < 1e-12
        # first reverse step t=1 is deterministic
        assert s.delta_tilde[1] == 0.0


def test_consecutive_coefficients_identities():
    # c_xt = 1 and c_st = 0 hold for every consecutive pair
    for T in (4, 7, 33):
        s = make_schedule(T)
        assert np.max(np.abs(s.c_xt[1:] - 1.0)) < 1e-12
        assert np.max(np.abs(s.c_st[1:])) < 1e-12


def test_generalized_pair_coefficients():
    T = 20
    s = make_schedule(T)
    for (hi, lo) in ((20, 15), (15, 8), (8, 1), (5, 4)):
        c_x, c_s, c_f, _, _ = step_coefficients(s.alpha, s.delta, T, hi, lo)
        assert abs(c_x - 1.0) < 1e-12
        assert abs(c_s) < 1e-12
        expect = (s.alpha[hi] - s.alpha[lo]) / s.alpha[hi]
        assert abs(c_f - expect) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=500))
def test_schedule_properties(T):
    s = make_schedule(T)
    assert s.alpha[0] == 0.0 and s.alpha[T] == 1.0
    assert np.all(np.diff(s.alpha) > 0)
    assert np.allclose(s.delta, s.delta[::-1], rtol=0, atol=1e-15)
    assert np.all(s.delta_tilde[1:] >= 0)
    assert np.all(s.delta_cond[1:T] > 0)
    assert s.delta_cond[T] == 0.0


def test_forward_sample_formula():
    T = 10
    s = make_schedule(T)
    g = stream(0, "test-forward")
    x0 = g.standard_normal((6, 6, 6))
    xT = g.standard_normal((6, 6, 6))
    eps = g.standard_normal((6, 6, 6))
    for t in (0, 1, 5, 10):
        xt = forward_sample(x0, xT, t, eps, s)
        a, d = s.alpha[t], s.delta[t]
        assert np.allclose(xt, (1 - a) * x0 + a * xT + np.sqrt(d) * eps,
                           rtol=0, atol=1e-15)
    # pinned endpoints exactly
    assert np.array_equal(forward_sample(x0, xT, 0, eps, s), x0)
    assert np.array_equal(forward_sample(x0, xT, T, eps, s) - np.sqrt(0.0) * eps, xT)


def test_loss_target_oracle_identity():
    # x_t - target == x0 to a few ulp, at every t
    T = 50
    s = make_schedule(T)
    g = stream(1, "test-target")
    x0 = g.standard_normal((5, 5, 5))
    xT = g.standard_normal((5, 5, 5))
    for t in range(0, T + 1):
        eps = g.standard_normal((5, 5, 5))
        xt = forward_sample(x0, xT, t, eps, s)
        f = loss_target(x0, xT, t, eps, s)
        err = np.max(np.abs((xt - f) - x0))
        assert err <= 4 * np.finfo(np.float64).eps * np.max(np.abs(x0) + 1)


def test_noise_free_reverse_matches_closed_form():
    T = 50
    s = make_schedule(T)
    g = stream(2, "test-reverse")
    x0 = g.standard_normal((4, 4, 4))
    xT = g.standard_normal((4, 4, 4))
    x = xT.copy()
    for t in range(T, 0, -1):
        f = s.alpha[t] * (xT - x0)  # noise-free target
        x = reverse_step(x, f, xT, t, None, s)
        expect = (1 - s.alpha[t - 1]) * x0 + s.alpha[t - 1] * xT
        assert np.max(np.abs(x - expect)) < 1e-10, t
    assert np.max(np.abs(x - x0)) < 1e-10


def test_oracle_denoiser_sampling_returns_x0():
    T = 40
    s = make_schedule(T)
    g = stream(3, "test-oracle")
    x0 = g.standard_normal((4, 4, 4))
    xT = g.standard_normal((4, 4, 4))

    def predict(x, t):
        return x - x0  # oracle: exactly the noise part

    for n_steps in (1, 10, T):
        out = sample(predict, xT, s, n_steps)
        assert np.max(np.abs(out - x0)) < 1e-8, n_steps


def test_reverse_step_noise_rules():
    s = make_schedule(10)
    x = np.zeros((3, 3, 3))
    with pytest.raises(ValueError):
        reverse_step(x, x, x, 0, None, s)
    # noise at t=1 must be rejected: the last step is deterministic
    with pytest.raises(ValueError):
        reverse_step(x, x, x, 1, np.ones_like(x), s)
    reverse_step(x, x, x, 1, None, s)
    reverse_step(x, x, x, 1, np.zeros_like(x), s)


def test_bridge_transition_consistency_montecarlo():
    # composing the t -> t-1 posterior with the marginal at t must
    # reproduce the marginal at t-1 (checked in mean and variance)
    g = stream(4, "test-mc")
    n = 20000
    for T, t in ((10, 5), (10, 9), (25, 2)):
        s = make_schedule(T)
        x0v, xTv = 0.7, -0.4
        x0 = np.full(n, x0v)
        xT = np.full(n, xTv)
        eps = g.standard_normal(n)
        xt = (1 - s.alpha[t]) * x0 + s.alpha[t] * xT + np.sqrt(s.delta[t]) * eps
        f_true = s.alpha[t] * (xT - x0) + np.sqrt(s.delta[t]) * eps
        noise = g.standard_normal(n) if t > 1 else None
        prev = reverse_step(xt.reshape(n, 1, 1), f_true.reshape(n, 1, 1),
                            xT.reshape(n, 1, 1), t,
                            None if noise is None else noise.reshape(n, 1, 1),
                            s).ravel()
        want_mean = (1 - s.alpha[t - 1]) * x0v + s.alpha[t - 1] * xTv
        want_var = s.delta[t - 1]
        se_mean = np.sqrt(max(want_var, 1e-12) / n)
        assert abs(prev.mean() - want_mean) < 4 * se_mean + 1e-12
        if want_var > 0:
            se_var = want_var * np.sqrt(2.0 / (n - 1))
            assert abs(prev.var(ddof=1) - want_var) < 4 * se_var


def test_ddim_timesteps_contract():
    assert ddim_timesteps(1000, 10)[0] == 1000
    for T, n in ((1000, 10), (50, 7), (10, 10), (8, 1)):
        steps = ddim_timesteps(T, n)
        assert len(steps) == n
        assert steps[0] == T
        assert all(a > b for a, b in zip(steps, steps[1:]))
        assert steps[-1] >= 1
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)


def test_volume_wrappers_and_l1():
    s = make_schedule(8)
    g = stream(5, "test-wrap")
    x0 = Volume(g.standard_normal((4, 4, 4)), (0.5, 0.5, 0.5))
    xT = Volume(g.standard_normal((4, 4, 4)), (0.5, 0.5, 0.5))
    eps = Volume(g.standard_normal((4, 4, 4)), (0.5, 0.5, 0.5))
    out = forward_sample(x0, xT, 3, eps, s)
    assert isinstance(out, Volume)
    assert out.spacing == x0.spacing
    mismatched = Volume(np.zeros((4, 4, 4)), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        forward_sample(x0, mismatched, 3, eps, s)
    assert l1_loss(x0, x0) == 0.0
    assert l1_loss(out, out) == 0.0


def test_schedule_rows_export():
    T = 6
    rows = schedule_rows(make_schedule(T))
    assert len(rows) == T + 1
    assert rows[0][0] == 0 and rows[0][3] is None
    assert rows[T][0] == T
    assert all(len(r) == 8 for r in rows)


def test_float32_stays_float32():
    # schedule arithmetic must not promote float32 volumes
    s = make_schedule(12)
    g = stream(6, "test-dtype")
    x0 = g.standard_normal((4, 4, 4)).astype(np.float32)
    xT = g.standard_normal((4, 4, 4)).astype(np.float32)
    eps = g.standard_normal((4, 4, 4)).astype(np.float32)
    assert forward_sample(x0, xT, 5, eps, s).dtype == np.float32
    assert loss_target(x0, xT, 5, eps, s).dtype == np.float32
    assert reverse_step(x0, eps, xT, 5, None, s).dtype == np.float32

    def predict(x, t):
        assert x.dtype == np.float32
        return x * np.float32(0.1)

    assert sample(predict, xT, s, 4).dtype == np.float32
