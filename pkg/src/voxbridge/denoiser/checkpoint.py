"""Binary checkpoint container for the denoiser.

Layout (little-endian):
  magic "C2CK" | u32 version | u32 length + JSON header | u32 tensor
  count | records. Each record: u32 name length, UTF-8 name, u32 ndim,
  u32 dims, float32 C-order payload.

The JSON header carries the network and training configurations, the
conditioning normalization, and scalar progress (step counter, learning
rate, loss curves); tensors hold parameters, their EMA shadow, and both
optimizer moment sets. Round-trips are bit-exact.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .condition import ConditioningSpec
from .train import TrainConfig, TrainState
from .unet import DenoiserConfig, UNet

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointFormatError"]

MAGIC = b"C2CK"
VERSION = 1

_TENSOR_SETS = ("param", "ema", "adam_m", "adam_v")


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, state: TrainState):
    header = {
        "denoiser_config": state.net.config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "conditioning": state.cond_spec.to_dict(),
        "progress": {
            "step": state.step,
            "epoch": state.epoch,
            "lr": state.lr,
            # None encodes "no finite monitor yet" portably
            "best_monitor": (state.best_monitor
                             if np.isfinite(state.best_monitor) else None),
            "plateau_wait": state.plateau_wait,
            "loss_curve": state.loss_curve,
            "val_curve": state.val_curve,
        },
    }
    params = dict(state.net.named_parameters())
    tensors = []
    for name, p in params.items():
        tensors.append((f"param.{name}", p.data))
        tensors.append((f"ema.{name}", state.ema[name]))
        tensors.append((f"adam_m.{name}", state.adam_m[name]))
        tensors.append((f"adam_v.{name}", state.adam_v[name]))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(
                f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read(fh, 4, "header length"))
        try:
            header = json.loads(_read(fh, blob_len, "header"))
        except ValueError as exc:
            raise CheckpointFormatError(f"{path}: bad header JSON: {exc}") from None
        (count,) = struct.unpack("<I", _read(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(fh, 4, "name length"))
            name = _read(fh, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(fh, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read(fh, 4 * size, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after tensors")
    try:
        dcfg = DenoiserConfig.from_dict(header["denoiser_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        cond_spec = ConditioningSpec.from_dict(header["conditioning"])
        progress = header["progress"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad header contents: {exc}") from None
    net = UNet(dcfg, seed=tcfg.seed)
    sets = {s: {} for s in _TENSOR_SETS}
    for full, arr in tensors.items():
        prefix, _, name = full.partition(".")
        if prefix not in sets or not name:
            raise CheckpointFormatError(f"{path}: unexpected tensor {full!r}")
        sets[prefix][name] = arr
    params = dict(net.named_parameters())
    for setname, d in sets.items():
        if set(d) != set(params):
            raise CheckpointFormatError(
                f"{path}: tensor set {setname!r} does not cover the network")
    for name, p in params.items():
        if sets["param"][name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"{path}: shape mismatch for {name}: "
                f"{sets['param'][name].shape} vs {p.data.shape}")
        p.data = sets["param"][name]
    return TrainState(
        net=net,
        train_config=tcfg,
        cond_spec=cond_spec,
        ema=sets["ema"],
        adam_m=sets["adam_m"],
        adam_v=sets["adam_v"],
        step=int(progress["step"]),
        epoch=int(progress["epoch"]),
        lr=float(progress["lr"]),
        best_monitor=(float("inf") if progress["best_monitor"] is None
                      else float(progress["best_monitor"])),
        plateau_wait=int(progress["plateau_wait"]),
        loss_curve=[float(x) for x in progress["loss_curve"]],
        val_curve=[float(x) for x in progress["val_curve"]],
    )
