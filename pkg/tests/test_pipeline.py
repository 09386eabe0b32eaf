"""Volume-level inference: denoiser evaluation and full synthesis."""

import numpy as np
import pytest

from voxbridge.denoiser.pipeline import denoise_volume, ema_network, synthesize
from voxbridge.denoiser.tensor import Tensor
from voxbridge.denoiser.train import TrainConfig, TrainState, train
from voxbridge.denoiser.unet import DenoiserConfig
from voxbridge.geometry.volume import Volume
from voxbridge.seeds import stream

from test_train import DATASET, DCFG, GEO, SPEC


def fresh_state(seed=31):
    return TrainState.fresh(DenoiserConfig(**DCFG),
                            TrainConfig(epochs=1, T=50, seed=seed), SPEC)


def randomized_state(seed=32):
    """State whose raw and EMA parameter sets are distinct and nonzero."""
    state = fresh_state(seed)
    rng = stream(seed, "test-pipeline-randomize")
    for name, p in state.net.named_parameters():
        noise = 0.1 * rng.standard_normal(p.data.shape)
        if name.endswith("gamma"):
            p.data = (1.0 + noise).astype(np.float32)
        else:
            p.data = (p.data + noise).astype(np.float32)
        state.ema[name] = p.data + 0.05 * rng.standard_normal(
            p.data.shape).astype(np.float32)
    return state


@pytest.fixture(scope="module")
def trained():
    tcfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, T=50,
                       seed=33, ema_rate=0.9)
    return train(DATASET, DenoiserConfig(**DCFG), tcfg, SPEC)


def test_denoise_volume_matches_network():
    state = randomized_state()
    cond, x0 = DATASET[0]
    out = denoise_volume(state.net, SPEC, x0, cond, t=5)
    assert isinstance(out, Volume)
    assert out.same_geometry(x0)
    inp = SPEC.assemble(np.asarray(x0.data, dtype=np.float32), cond)
    want = state.net(Tensor(inp), 5).data[0, 0]
    assert np.array_equal(out.data, want)


def test_denoise_volume_geometry_check():
    state = fresh_state()
    cond, _ = DATASET[0]
    bad = Volume(np.zeros((4, 4, 4), dtype=np.float32),
                 spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="share dims"):
        denoise_volume(state.net, SPEC, bad, cond, t=1)


def test_ema_network_carries_shadow_params():
    state = randomized_state(34)
    net = ema_network(state)
    for name, p in net.named_parameters():
        assert np.array_equal(p.data, state.ema[name]), name
    raw = dict(state.net.named_parameters())
    assert any(not np.array_equal(p.data, raw[n].data)
               for n, p in net.named_parameters())
    # the copy is independent of the stored shadow set
    net.stem.weight.data[...] = 99.0
    assert not np.any(state.ema["stem.weight"] == 99.0)


def test_synthesize_zero_network_returns_endpoint():
    # an untrained network predicts zero everywhere, so the reverse chain
    # never leaves the bridge endpoint
    state = fresh_state(35)
    cond, _ = DATASET[0]
    out = synthesize(state, cond, n_steps=6)
    assert isinstance(out, Volume)
    assert out.same_geometry(cond.s_c)
    endpoint = SPEC.endpoint(cond)
    assert np.allclose(out.data, endpoint.data, atol=1e-6)


def test_synthesize_deterministic(trained):
    cond, _ = DATASET[1]
    a = synthesize(trained, cond, n_steps=5)
    b = synthesize(trained, cond, n_steps=5)
    assert np.array_equal(a.data, b.data)


def test_synthesize_ema_toggle(trained):
    cond, _ = DATASET[0]
    with_ema = synthesize(trained, cond, n_steps=4, use_ema=True)
    without = synthesize(trained, cond, n_steps=4, use_ema=False)
    assert not np.array_equal(with_ema.data, without.data)


def test_synthesize_step_count_matters(trained):
    cond, _ = DATASET[0]
    few = synthesize(trained, cond, n_steps=2)
    many = synthesize(trained, cond, n_steps=8)
    assert not np.array_equal(few.data, many.data)
    assert np.all(np.isfinite(few.data)) and np.all(np.isfinite(many.data))


def test_synthesize_output_dtype(trained):
    cond, _ = DATASET[0]
    out = synthesize(trained, cond, n_steps=3)
    assert out.data.dtype == np.float32
