"""Shared network building blocks: parameter store, linear/attention/FFN layers.

Layers are plain functions over a :class:`ParamStore`; parameters are created
lazily on first use from the store's seeded rng, so a forward pass at build
time doubles as initialization.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore(dict):
    """Named parameter dict with deterministic lazy initialization."""

    def __init__(self, rng: np.random.Generator, dtype: str = "f32"):
        super().__init__()
        self.rng = rng
        self.dtype = dtype

    def param(self, name: str, shape, init: str = "xavier") -> Tensor:
        if name in self:
            return self[name]
        if init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1] if len(shape) > 1 else shape[0]
            if len(shape) == 4:  # conv kernels (F,C,kh,kw)
                rcp = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rcp, shape[0] * rcp
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "normal":
            data = 0.02 * self.rng.standard_normal(shape)
        elif init == "unit_normal":
            data = self.rng.standard_normal(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, dtype=self.dtype, requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def linear(ps: ParamStore, name: str, x: Tensor, out_dim: int, bias: bool = True) -> Tensor:
    w = ps.param(f"{name}.w", (x.shape[-1], out_dim))
    y = T.matmul(x, w)
    if bias:
        y = T.add(y, ps.param(f"{name}.b", (out_dim,), init="zeros"))
    return y


def layer_norm_affine(ps: ParamStore, name: str, x: Tensor) -> Tensor:
    d = x.shape[-1]
    g = ps.param(f"{name}.g", (d,), init="ones")
    b = ps.param(f"{name}.b", (d,), init="zeros")
    return T.add(T.mul(T.layer_norm(x), g), b)


def multi_head_attention(
    ps: ParamStore,
    name: str,
    q_in: Tensor,
    kv_in: Tensor,
    heads: int,
    attn_bias: np.ndarray | None = None,
) -> Tensor:
    """Standard scaled dot-product attention over single sequences.

    ``q_in`` is (Lq, D), ``kv_in`` is (Lk, D). ``attn_bias`` (Lq, Lk) is added
    to the pre-softmax scores of every head (use -1e9 entries to forbid keys);
    it is a constant, not part of the tape.
    """
    d = q_in.shape[-1]
    if d % heads:
        raise T.ShapeError(f"attention dim {d} not divisible by {heads} heads")
    dk = d // heads
    lq, lk = q_in.shape[0], kv_in.shape[0]

    def split(x: Tensor, length: int) -> Tensor:
        return T.transpose(T.reshape(x, (length, heads, dk)), (1, 0, 2))

    q = split(linear(ps, f"{name}.q", q_in, d), lq)
    k = split(linear(ps, f"{name}.k", kv_in, d), lk)
    v = split(linear(ps, f"{name}.v", kv_in, d), lk)

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
    if attn_bias is not None:
        scores = T.add(scores, Tensor(attn_bias.astype(scores.data.dtype)))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (h, Lq, dk)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (lq, d))
    return linear(ps, f"{name}.o", ctx, d)


def ffn(ps: ParamStore, name: str, x: Tensor, hidden: int) -> Tensor:
    h = T.gelu(linear(ps, f"{name}.fc1", x, hidden))
    return linear(ps, f"{name}.fc2", h, x.shape[-1])


def encoder_layer(ps: ParamStore, name: str, x: Tensor, heads: int, ffn_mult: int = 4) -> Tensor:
    """Post-norm transformer encoder layer."""
    x = layer_norm_affine(ps, f"{name}.ln1", T.add(x, multi_head_attention(ps, f"{name}.attn", x, x, heads)))
    x = layer_norm_affine(ps, f"{name}.ln2", T.add(x, ffn(ps, f"{name}.ffn", x, ffn_mult * x.shape[-1])))
    return x


def mlp(ps: ParamStore, name: str, x: Tensor, layers: int, out_dim: int | None = None) -> Tensor:
    """ReLU MLP; ``layers == 0`` is the identity."""
    out_dim = out_dim or x.shape[-1]
    for i in range(layers):
        x = linear(ps, f"{name}.{i}", x, out_dim)
        if i + 1 < layers:
            x = T.relu(x)
    return x


def mlp_numpy(ps: ParamStore, name: str, x: np.ndarray, layers: int) -> np.ndarray:
    """Tape-free twin of :func:`mlp` for detached computations (attention masks)."""
    for i in range(layers):
        x = x @ ps[f"{name}.{i}.w"].data + ps[f"{name}.{i}.b"].data
        if i + 1 < layers:
            x = np.maximum(x, 0)
    return x


_POS_CACHE: dict = {}


def sine_pos_2d(h: int, w: int, d: int, dtype) -> np.ndarray:
    """Fixed 2D sine/cosine position features, (h*w, d); DETR-style."""
    key = (h, w, d, np.dtype(dtype).str)
    if key in _POS_CACHE:
        return _POS_CACHE[key]
    if d % 4:
        raise T.ShapeError(f"sine_pos_2d needs dim divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys = np.arange(h)[:, None] * freqs[None, :]
    xs = np.arange(w)[:, None] * freqs[None, :]
    ye = np.concatenate([np.sin(ys), np.cos(ys)], axis=1)  # (h, d/2)
    xe = np.concatenate([np.sin(xs), np.cos(xs)], axis=1)  # (w, d/2)
    grid = np.concatenate(
        [np.repeat(ye, w, axis=0), np.tile(xe, (h, 1))], axis=1
    )  # (h*w, d)
    out = grid.astype(dtype)
    _POS_CACHE[key] = out
    return out
