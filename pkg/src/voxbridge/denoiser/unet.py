"""Volumetric residual U-Net with timestep conditioning.

Encoder/decoder over the configured residual stages with adaptive group
normalization in every residual block (timestep embedding mapped to a
per-channel scale and shift) and one global attention block at the
configured downsampling factor. The final convolution is zero-initialized
so the untrained network predicts zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["DenoiserConfig", "UNet", "Module", "timestep_embedding"]

TIME_EMB_DIM = 64  # sinusoidal embedding width


@dataclass
class DenoiserConfig:
    in_channels: int = 5
    stage_channels: tuple = (16, 32, 48, 64)
    attention_at_factor: int = 8
    attention_heads: int = 2
    attention_head_channels: int = 16
    groups: int = 8
    base_resolution: int = 32

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.stage_channels:
            raise ValueError("stage_channels must be nonempty")
        if self.in_channels < 1:
            raise ValueError("in_channels must be at least 1")
        down = 2 ** (len(self.stage_channels) - 1)
        if self.base_resolution % down:
            raise ValueError(
                f"base resolution {self.base_resolution} not divisible by {down}")
        factors = [2 ** i for i in range(len(self.stage_channels))]
        if self.attention_at_factor not in factors:
            raise ValueError(
                f"attention factor {self.attention_at_factor} not among stage "
                f"factors {factors}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "attention_at_factor": self.attention_at_factor,
            "attention_heads": self.attention_heads,
            "attention_head_channels": self.attention_head_channels,
            "groups": self.groups,
            "base_resolution": self.base_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def timestep_embedding(t, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, TIME_EMB_DIM).

    Periods run geometrically from 1 to 1e4 so neighbouring timesteps stay
    distinguishable across the whole 1..T range.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = TIME_EMB_DIM // 2
    periods = 10000.0 ** (np.arange(half) / (half - 1))
    ang = t[:, None] / periods[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class Module:
    """Minimal parameter container with named traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._mods[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
                isinstance(m, Module) for m in value):
            for i, m in enumerate(value):
                self._mods[f"{name}{i}"] = m
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._mods.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _weight(rng, shape, fan_in, dtype, zero=False):
    if zero:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, rng, dtype, zero=False):
        super().__init__()
        self.weight = _weight(rng, (c_out, c_in, kernel, kernel, kernel),
                              c_in * kernel ** 3, dtype, zero)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype, zero=False):
        super().__init__()
        self.weight = _weight(rng, (d_in, d_out), d_in, dtype, zero)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class GroupNorm(Module):
    def __init__(self, channels, groups, dtype):
        super().__init__()
        g = min(groups, channels)
        while channels % g:
            g -= 1  # largest divisor not exceeding the requested group count
        self.groups = g
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock(Module):
    """GN -> SiLU -> conv twice, timestep scale/shift applied in between.

    The modulation projections and the second conv start at zero, so a
    fresh block reduces to its skip path.
    """

    def __init__(self, c_in, c_out, emb_dim, groups, rng, dtype):
        super().__init__()
        self.norm1 = GroupNorm(c_in, groups, dtype)
        self.conv1 = Conv3d(c_in, c_out, 3, rng, dtype)
        self.emb_scale = Linear(emb_dim, c_out, rng, dtype, zero=True)
        self.emb_shift = Linear(emb_dim, c_out, rng, dtype, zero=True)
        self.norm2 = GroupNorm(c_out, groups, dtype)
        self.conv2 = Conv3d(c_out, c_out, 3, rng, dtype, zero=True)
        self.skip = Conv3d(c_in, c_out, 1, rng, dtype) if c_in != c_out else None
        self.c_out = c_out

    def __call__(self, x, emb):
        b = x.shape[0]
        h = self.conv1(T.silu(self.norm1(x)))
        se = T.silu(emb)
        scale = T.reshape(self.emb_scale(se), (b, self.c_out, 1, 1, 1))
        shift = T.reshape(self.emb_shift(se), (b, self.c_out, 1, 1, 1))
        h = self.norm2(h)
        h = h + T.mul(h, scale) + shift  # (1 + scale) * h + shift
        h = self.conv2(T.silu(h))
        base = self.skip(x) if self.skip is not None else x
        return base + h


class AttentionBlock(Module):
    """Global self-attention over every position of the (downsampled) grid."""

    def __init__(self, channels, heads, head_channels, groups, rng, dtype):
        super().__init__()
        self.heads = heads
        self.head_channels = head_channels
        self.inner = heads * head_channels
        self.norm = GroupNorm(channels, groups, dtype)
        self.to_q = Conv3d(channels, self.inner, 1, rng, dtype)
        self.to_k = Conv3d(channels, self.inner, 1, rng, dtype)
        self.to_v = Conv3d(channels, self.inner, 1, rng, dtype)
        self.proj = Conv3d(self.inner, channels, 1, rng, dtype, zero=True)

    def __call__(self, x):
        b = x.shape[0]
        spatial = x.shape[2:]
        n = int(np.prod(spatial))
        h = self.norm(x)
        hd = (b, self.heads, self.head_channels, n)
        q = T.reshape(self.to_q(h), hd)
        k = T.reshape(self.to_k(h), hd)
        v = T.reshape(self.to_v(h), hd)
        att = T.attention_core(q, k, v)
        att = T.reshape(att, (b, self.inner) + spatial)
        return x + self.proj(att)


class UNet(Module):
    """f(x_t, aux, t): concatenated input channels to a one-channel residual."""

    def __init__(self, config: DenoiserConfig, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=int(seed), spawn_key=(0x756e6574,)))
        ch = config.stage_channels
        stages = len(ch)
        gr = config.groups
        self.time_fc1 = Linear(TIME_EMB_DIM, TIME_EMB_DIM, rng, dtype)
        self.time_fc2 = Linear(TIME_EMB_DIM, TIME_EMB_DIM, rng, dtype)
        self.stem = Conv3d(config.in_channels, ch[0], 3, rng, dtype)
        enc = []
        for i in range(stages):
            c_in = ch[max(i - 1, 0)]
            enc.append(ResBlock(c_in, ch[i], TIME_EMB_DIM, gr, rng, dtype))
        self.enc = enc
        self.attn_stage = config.attention_at_factor.bit_length() - 1
        self.attn = AttentionBlock(
            ch[self.attn_stage], config.attention_heads,
            config.attention_head_channels, gr, rng, dtype)
        self.mid = ResBlock(ch[-1], ch[-1], TIME_EMB_DIM, gr, rng, dtype)
        dec = []
        for i in range(stages - 2, -1, -1):
            dec.append(ResBlock(ch[i + 1] + ch[i], ch[i], TIME_EMB_DIM, gr,
                                rng, dtype))
        self.dec = dec
        self.out_norm = GroupNorm(ch[0], gr, dtype)
        self.out_conv = Conv3d(ch[0], 1, 3, rng, dtype, zero=True)
        self._dtype = dtype

    def __call__(self, x: Tensor, t) -> Tensor:
        """x: (B, in_channels, H, W, D); t: int or (B,) ints in [1, T]."""
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, "
                f"got {x.shape[1]}")
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 1):
            raise ValueError(f"timesteps must be >= 1, got {t_arr.min()}")
        if len(t_arr) not in (1, x.shape[0]):
            raise ValueError("t must be scalar or one per batch item")
        if len(t_arr) == 1:
            t_arr = np.repeat(t_arr, x.shape[0])
        emb = Tensor(timestep_embedding(t_arr, dtype=self._dtype))
        emb = self.time_fc2(T.silu(self.time_fc1(emb)))
        stages = len(self.config.stage_channels)
        h = self.stem(x)
        skips = []
        for i in range(stages):
            h = self.enc[i](h, emb)
            if i == self.attn_stage:
                h = self.attn(h)
            if i < stages - 1:
                skips.append(h)
                h = T.avg_pool3d(h)
        h = self.mid(h, emb)
        for j, i in enumerate(range(stages - 2, -1, -1)):
            h = T.upsample_nearest3d(h)
            h = self.dec[j](T.concat([h, skips[i]], axis=1), emb)
        return self.out_conv(T.silu(self.out_norm(h)))
