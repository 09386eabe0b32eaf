"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor records its parents and a backward closure when any input
requires gradients; backward() walks the graph in reverse topological
order and accumulates into .grad buffers. Structured network ops (conv,
normalization, pooling, attention) are implemented as fused nodes with
hand-written backward passes; everything is dtype-agnostic so gradient
checks can run in float64 while training runs in float32.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "add", "mul", "neg", "sub", "scale", "exp", "sigmoid", "silu",
    "tsum", "tmean", "tabs", "matmul", "reshape", "concat",
    "conv3d", "avg_pool3d", "upsample_nearest3d", "group_norm",
    "attention_core",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of self into every reachable parent.

        The recorded graph is consumed: calling backward a second time on
        the same forward pass raises.
        """
        if not self.requires_grad:
            raise RuntimeError("tensor does not require gradients")
        if self._done:
            raise RuntimeError(
                "backward already ran for this graph; run forward again")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        _accum(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            # consume the graph so activations free up and reuse is an error
            node._backward = None
            node._parents = ()
            node._done = True

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))

    def backward():
        _accum(a, -out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, parents=(a,))

    def backward():
        _accum(a, out.grad * c)

    out._backward = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), parents=(a,))

    def backward():
        _accum(a, out.grad * out.data)

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_sigmoid(a.data), parents=(a,))

    def backward():
        _accum(a, out.grad * out.data * (1.0 - out.data))

    out._backward = backward if out.requires_grad else None
    return out


def _sigmoid(x):
    # split by sign for overflow safety
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = Tensor(a.data * s, parents=(a,))

    def backward():
        _accum(a, out.grad * (s * (1.0 + a.data * (1.0 - s))))

    out._backward = backward if out.requires_grad else None
    return out


def tabs(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), parents=(a,))

    def backward():
        _accum(a, out.grad * np.sign(a.data))

    out._backward = backward if out.requires_grad else None
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), parents=(a,))

    def backward():
        _accum(a, np.broadcast_to(out.grad, a.shape).astype(a.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()), parents=(a,))

    def backward():
        g = out.grad / n
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward():
        ga = out.grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ out.grad
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backward():
        _accum(a, out.grad.reshape(a.shape))

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(offset, offset + s)
            _accum(t, out.grad[tuple(sl)])
            offset += s

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# structured network ops

def _offsets(k: int):
    return [(dz, dy, dx) for dz in range(k) for dy in range(k) for dx in range(k)]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3D convolution, stride 1, odd kernel, same padding.

    x: (B, Cin, H, W, D); w: (Cout, Cin, k, k, k); b: (Cout,) or None.
    Accumulates one shifted GEMM per kernel offset, which profiles faster
    here than a materialized im2col buffer.
    """
    B, Cin, H, W, D = x.shape
    Cout, Cin2, k, _, _ = w.shape
    if Cin != Cin2:
        raise ValueError(f"conv3d channel mismatch: input {Cin}, weight {Cin2}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) \
        if pad else x.data
    wk = w.data.reshape(Cout, Cin, k ** 3)
    acc = np.zeros((Cout, B, H, W, D), dtype=x.dtype)
    offs = _offsets(k)
    for o, (dz, dy, dx) in enumerate(offs):
        xs = xp[:, :, dz:dz + H, dy:dy + W, dx:dx + D]
        # (Cout, Cin) x (B, Cin, H, W, D) summed over Cin
        acc += np.tensordot(wk[:, :, o], xs, axes=(1, 1))
    y = np.moveaxis(acc, 0, 1)
    if b is not None:
        y = y + b.data[None, :, None, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(np.ascontiguousarray(y), parents=parents)

    def backward():
        g = out.grad  # (B, Cout, H, W, D)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        gmove = np.moveaxis(g, 1, 0)  # (Cout, B, H, W, D)
        for o, (dz, dy, dx) in enumerate(offs):
            xs = xp[:, :, dz:dz + H, dy:dy + W, dx:dx + D]
            # dW: correlate grad with input slice
            gw[:, :, dz, dy, dx] = np.tensordot(
                gmove, xs, axes=((1, 2, 3, 4), (0, 2, 3, 4)))
            # dX: spread grad through the transposed weights
            gxs = np.tensordot(wk[:, :, o], gmove, axes=(0, 0))  # (Cin, B, H, W, D)
            gxp[:, :, dz:dz + H, dy:dy + W, dx:dx + D] += np.moveaxis(gxs, 0, 1)
        _accum(w, gw)
        gx = gxp[:, :, pad:pad + H, pad:pad + W, pad:pad + D] if pad else gxp
        if pad:
            gx = np.ascontiguousarray(gx)
        _accum(x, gx)

    out._backward = backward if out.requires_grad else None
    return out


def avg_pool3d(x: Tensor) -> Tensor:
    """2x2x2 mean pooling; spatial dims must be even."""
    B, C, H, W, D = x.shape
    if H % 2 or W % 2 or D % 2:
        raise ValueError(f"avg_pool3d needs even dims, got {(H, W, D)}")
    xr = x.data.reshape(B, C, H // 2, 2, W // 2, 2, D // 2, 2)
    out = Tensor(xr.mean(axis=(3, 5, 7)), parents=(x,))

    def backward():
        g = out.grad / 8.0
        g = np.broadcast_to(
            g[:, :, :, None, :, None, :, None],
            (B, C, H // 2, 2, W // 2, 2, D // 2, 2),
        )
        _accum(x, g.reshape(B, C, H, W, D).astype(x.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def upsample_nearest3d(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of the three spatial dims."""
    B, C, H, W, D = x.shape
    y = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None],
        (B, C, H, 2, W, 2, D, 2),
    ).reshape(B, C, 2 * H, 2 * W, 2 * D)
    out = Tensor(np.ascontiguousarray(y), parents=(x,))

    def backward():
        g = out.grad.reshape(B, C, H, 2, W, 2, D, 2).sum(axis=(3, 5, 7))
        _accum(x, g)

    out._backward = backward if out.requires_grad else None
    return out


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization with per-channel affine parameters."""
    B, C = x.shape[0], x.shape[1]
    if C % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    spatial = x.shape[2:]
    n = (C // groups) * int(np.prod(spatial))
    xg = x.data.reshape(B, groups, n)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    shp = (1, C) + (1,) * len(spatial)
    y = xhat.reshape(x.shape) * gamma.data.reshape(shp) + beta.data.reshape(shp)
    out = Tensor(y, parents=(x, gamma, beta))

    def backward():
        g = out.grad
        red = (0,) + tuple(range(2, g.ndim))
        _accum(beta, g.sum(axis=red))
        _accum(gamma, (g * xhat.reshape(x.shape)).sum(axis=red))
        gh = (g * gamma.data.reshape(shp)).reshape(B, groups, n)
        # standard normalization backward per (sample, group)
        s1 = gh.sum(axis=2, keepdims=True)
        s2 = (gh * xhat).sum(axis=2, keepdims=True)
        gx = inv / n * (n * gh - s1 - xhat * s2)
        _accum(x, gx.reshape(x.shape).astype(x.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def _sorted_lastaxis_sum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis with value-sorted accumulation.

    Sorting first makes the reduction a pure function of the multiset of
    summands, so permuting them cannot change the floating-point result.
    """
    return np.sort(a, axis=-1).sum(axis=-1)


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over token axis N.

    q, k, v: (B, heads, channels, N). Softmax normalizer and output
    contraction use value-sorted reductions, making each output token
    bitwise invariant to any permutation applied jointly to the key and
    value token order.
    """
    B, H, C, N = q.shape
    # python float: keeps float32 inputs in float32
    sc = 1.0 / float(np.sqrt(C))
    qs = q.data * sc
    scores = np.matmul(np.swapaxes(qs, -1, -2), k.data)  # (B, H, Nq, Nk)
    m = scores.max(axis=-1, keepdims=True)
    ex = np.exp(scores - m)
    denom = _sorted_lastaxis_sum(ex)[..., None]
    attn = ex / denom
    # out[b,h,c,i] = sum_j attn[b,h,i,j] v[b,h,c,j], accumulated in sorted order
    prod = attn[:, :, None, :, :] * v.data[:, :, :, None, :]  # (B,H,C,Nq,Nk)
    y = _sorted_lastaxis_sum(prod)
    out = Tensor(y, parents=(q, k, v))

    def backward():
        g = out.grad  # (B, H, C, Nq)
        gv = np.matmul(attn.swapaxes(-1, -2), np.swapaxes(g, -1, -2)).swapaxes(-1, -2)
        # dAttn[b,h,i,j] = sum_c g[b,h,c,i] v[b,h,c,j]
        gattn = np.matmul(np.swapaxes(g, -1, -2), v.data)
        gscores = attn * (gattn - (attn * gattn).sum(axis=-1, keepdims=True))
        gq = np.matmul(k.data, np.swapaxes(gscores, -1, -2)) * sc
        gk = np.matmul(qs, gscores)
        _accum(q, gq)
        _accum(k, gk)
        _accum(v, gv)

    out._backward = backward if out.requires_grad else None
    return out
