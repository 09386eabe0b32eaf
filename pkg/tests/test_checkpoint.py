"""Checkpoint container: bit-exact round-trips and format rejection."""

import struct

import numpy as np
import pytest

from voxbridge.denoiser.checkpoint import (
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from voxbridge.denoiser.condition import ConditioningSpec
from voxbridge.denoiser.train import TrainConfig, TrainState, train
from voxbridge.denoiser.unet import DenoiserConfig

from test_train import DATASET, DCFG, SPEC


@pytest.fixture(scope="module")
def trained():
    tcfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, T=50,
                       seed=21, ema_rate=0.9)
    return train(DATASET, DenoiserConfig(**DCFG), tcfg, SPEC,
                 val_dataset=DATASET[:1])


def test_round_trip_bit_exact(trained, tmp_path):
    path = tmp_path / "ck.c2ck"
    save_checkpoint(path, trained)
    back = load_checkpoint(path)
    assert back.net.config == trained.net.config
    assert back.train_config == trained.train_config
    assert back.cond_spec == trained.cond_spec
    assert back.step == trained.step
    assert back.epoch == trained.epoch
    assert back.lr == trained.lr
    assert back.best_monitor == trained.best_monitor
    assert back.plateau_wait == trained.plateau_wait
    assert back.loss_curve == trained.loss_curve
    assert back.val_curve == trained.val_curve
    params = dict(trained.net.named_parameters())
    loaded = dict(back.net.named_parameters())
    assert set(params) == set(loaded)
    for name in params:
        assert np.array_equal(params[name].data, loaded[name].data), name
        assert np.array_equal(trained.ema[name], back.ema[name]), name
        assert np.array_equal(trained.adam_m[name], back.adam_m[name]), name
        assert np.array_equal(trained.adam_v[name], back.adam_v[name]), name


def test_save_is_deterministic(trained, tmp_path):
    a, b = tmp_path / "a.c2ck", tmp_path / "b.c2ck"
    save_checkpoint(a, trained)
    save_checkpoint(b, trained)
    assert a.read_bytes() == b.read_bytes()


def test_resave_after_load_identical(trained, tmp_path):
    first = tmp_path / "first.c2ck"
    save_checkpoint(first, trained)
    second = tmp_path / "second.c2ck"
    save_checkpoint(second, load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()


def test_infinite_best_monitor_round_trips(tmp_path):
    state = TrainState.fresh(DenoiserConfig(**DCFG),
                             TrainConfig(epochs=1, T=50, seed=22), SPEC)
    assert state.best_monitor == float("inf")
    path = tmp_path / "fresh.c2ck"
    save_checkpoint(path, state)
    assert load_checkpoint(path).best_monitor == float("inf")


def test_loaded_state_resumes_training(trained, tmp_path):
    path = tmp_path / "resume.c2ck"
    save_checkpoint(path, trained)
    state = load_checkpoint(path)
    tcfg = TrainConfig(epochs=3, learning_rate=1e-3, batch_size=2, T=50,
                       seed=21, ema_rate=0.9)
    out = train(DATASET, DenoiserConfig(**DCFG), tcfg, SPEC,
                val_dataset=DATASET[:1], state=state)
    assert out.epoch == 3
    assert len(out.loss_curve) == 3


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.c2ck"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
        load_checkpoint(path)


def test_bad_version_rejected(trained, tmp_path):
    path = tmp_path / "v.c2ck"
    save_checkpoint(path, trained)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(path)


def test_truncation_rejected(trained, tmp_path):
    path = tmp_path / "t.c2ck"
    save_checkpoint(path, trained)
    raw = path.read_bytes()
    for cut in (2, 6, 10, len(raw) // 2, len(raw) - 3):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


def test_trailing_bytes_rejected(trained, tmp_path):
    path = tmp_path / "x.c2ck"
    save_checkpoint(path, trained)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)


def test_format_error_is_value_error():
    assert issubclass(CheckpointFormatError, ValueError)


def test_missing_tensor_set_rejected(trained, tmp_path):
    path = tmp_path / "m.c2ck"
    save_checkpoint(path, trained)
    raw = bytearray(path.read_bytes())
    # corrupt one tensor name so a set no longer covers the network
    marker = b"ema."
    pos = raw.find(marker)
    assert pos > 0
    raw[pos:pos + 4] = b"emu."
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
