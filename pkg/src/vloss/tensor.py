"""Dense tensors with a fixed differentiable op catalog and taped reverse-mode gradients.

Every other module builds on this one. Ops are plain functions ``op(*inputs,
**attrs) -> Tensor``; they are also reachable by name through :func:`forward`.
When any input has ``requires_grad``, the op records a vector-Jacobian closure
on the output (creation order is the tape, so inputs always precede consumers).
:func:`backward` replays the closures in reverse topological order.

Tape policy: a graph is consumed by the backward pass that visits it. Closures
and parent links of visited nodes are dropped so intermediate buffers can be
freed; call :func:`backward` once per loss.
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

DTYPES = {"f32": np.float32, "f64": np.float64}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_OF_TAG = {0: np.float32, 1: np.float64}

_ids = itertools.count()


class ShapeError(ValueError):
    """Input shapes violate an op's shape rule; message names the offending dims."""


class OpError(ValueError):
    """Unknown op name or input outside an op's documented domain."""


class Tensor:
    """A dense row-major array plus the bookkeeping needed for reverse mode.

    ``data`` is always a float32 or float64 ndarray. ``grad`` stays ``None``
    until a backward pass deposits into it (leaves only). Data is treated as
    immutable after creation; only ``grad`` accumulates.
    """

    __slots__ = ("tid", "data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is not None and dtype not in DTYPES:
            raise OpError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype])
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.tid = next(_ids)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Leaf view of the same data, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, {self.dtype}{flag})"

    # -- operator sugar (compositions of catalog ops) -----------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        other = _as_tensor(other, like=self)
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, like=self), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _record(out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> None:
    out._parents = tuple(parents)
    out._vjp = vjp


_grad_enabled = True


class no_grad:
    """Context manager suppressing tape recording (inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _tracked(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-replay the tape from a scalar ``loss``.

    Returns ``{tensor-id: grad}`` for every ``requires_grad`` leaf reached,
    and accumulates the same arrays into each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise OpError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.tid in seen:
            continue
        seen.add(node.tid)
        stack.append((node, True))
        for p in node._parents:
            if p.tid not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(node.tid, None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaf_grads[node.tid] = g
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tid in grads:
                grads[parent.tid] = grads[parent.tid] + pg
            else:
                grads[parent.tid] = pg
        node._vjp = None
        node._parents = ()
    return leaf_grads


# ---------------------------------------------------------------------------
# catalog ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data, requires_grad=_tracked(a, b))
    if out.requires_grad:
        _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data, requires_grad=_tracked(a, b))
    if out.requires_grad:
        _record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )
    return out


def scale(a, alpha: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * a.data.dtype.type(alpha), requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g * alpha,))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcast over leading batch dims (ndim >= 2)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_tracked(a, b))
    if out.requires_grad:

        def vjp(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        _record(out, (a, b), vjp)
    return out


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} with pad {pad}")
    return ho, wo


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with explicit zero padding.

    ``x`` is (C,H,W) or (B,C,H,W); ``w`` is (F,C,kh,kw); optional ``bias`` is (F,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {w.shape} must be 3D-4D / 4D")
    bsz, cin, h, wd_ = xd.shape
    f, cin_k, kh, kw = w.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    ho, wo = _conv_geometry(h, wd_, kh, kw, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, ho * wo, cin * kh * kw)
    wmat = w.data.reshape(f, cin * kh * kw)
    out_data = (cols @ wmat.T).transpose(0, 2, 1).reshape(bsz, f, ho, wo)

    parents = [x, w]
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
        out_data = out_data + bias.data[:, None, None]
        parents.append(bias)
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data, requires_grad=_tracked(*parents))
    if out.requires_grad:

        def vjp(g):
            gd = g[None] if squeeze else g
            gmat = gd.reshape(bsz, f, ho * wo).transpose(0, 2, 1)  # (B,P,F)
            gw = np.einsum("bpf,bpk->fk", gmat, cols).reshape(w.shape)
            gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            gc = gcols.transpose(0, 3, 4, 5, 1, 2)  # (B,C,kh,kw,Ho,Wo)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[
                        :, :, i, j
                    ]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd_] if pad else gxp
            if squeeze:
                gx = gx[0]
            grads = [gx, gw]
            if bias is not None:
                grads.append(gd.sum(axis=(0, 2, 3)))
            return tuple(grads)

        _record(out, parents, vjp)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)
    if out.requires_grad:
        # subgradient at 0 defined as 0
        _record(out, (a,), lambda g: (g * (a.data > 0),))
    return out


def gelu(a) -> Tensor:
    """Exact (erf) form."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor(x * phi, requires_grad=a.requires_grad)
    if out.requires_grad:
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _record(out, (a,), lambda g: (g * (phi + x * pdf),))
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = expit(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g * y,))
    return out


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log. With ``eps > 0`` computes log(x + eps); otherwise rejects x <= 0."""
    a = _as_tensor(a)
    if eps == 0.0 and np.any(a.data <= 0):
        raise OpError("log: non-positive input without eps guard")
    shifted = a.data + eps
    out = Tensor(np.log(shifted), requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g / shifted,))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        _record(out, (a,), vjp)
    return out


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"layer_norm: needs a non-empty last axis, got {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, requires_grad=a.requires_grad)
    if out.requires_grad:
        n = a.shape[-1]

        def vjp(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gy),)

        _record(out, (a,), vjp)
    return out


def mean_pool_spatial(a) -> Tensor:
    """Mean over the trailing two (spatial) axes: (...,C,H,W) -> (...,C)."""
    a = _as_tensor(a)
    if a.ndim < 3:
        raise ShapeError(f"mean_pool_spatial: needs (...,C,H,W), got {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    out = Tensor(a.data.mean(axis=(-1, -2)), requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (np.broadcast_to(g[..., None, None] / (h * w), a.shape).copy(),))
    return out


def _upsample_index(n: int, factor: int):
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_upsample(a, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling of the trailing two axes.

    Uses the align_corners=False convention: output pixel centers map back via
    src = (dst + 0.5)/factor - 0.5, clamped at the border. Worked 2x2 -> 4x4
    example for one channel with input [[0, 1], [2, 3]]:

        [[0.  , 0.25, 0.75, 1.  ],
         [0.5 , 0.75, 1.25, 1.5 ],
         [1.5 , 1.75, 2.25, 2.5 ],
         [2.  , 2.25, 2.75, 3.  ]]
    """
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"bilinear_upsample: needs trailing H,W axes, got {a.shape}")
    if factor < 1 or int(factor) != factor:
        raise OpError(f"bilinear_upsample: factor must be a positive integer, got {factor}")
    factor = int(factor)
    h, w = a.shape[-2], a.shape[-1]
    iy0, iy1, wy = _upsample_index(h, factor)
    ix0, ix1, wx = _upsample_index(w, factor)

    def _fwd(x):
        rows = np.take(x, iy0, axis=-2) * (1 - wy)[:, None] + np.take(x, iy1, axis=-2) * wy[:, None]
        return np.take(rows, ix0, axis=-1) * (1 - wx) + np.take(rows, ix1, axis=-1) * wx

    out = Tensor(_fwd(a.data), requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            gb = g.reshape(-1, h * factor, w * factor)
            rows = np.zeros((gb.shape[0], h * factor, w), dtype=g.dtype)
            np.add.at(rows, (slice(None), slice(None), ix0), gb * (1 - wx))
            np.add.at(rows, (slice(None), slice(None), ix1), gb * wx)
            gx = np.zeros((gb.shape[0], h, w), dtype=g.dtype)
            np.add.at(gx, (slice(None), iy0), rows * (1 - wy)[:, None])
            np.add.at(gx, (slice(None), iy1), rows * wy[:, None])
            return (gx.reshape(a.shape),)

        _record(out, (a,), vjp)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    out = Tensor(data, requires_grad=a.requires_grad)
    if out.requires_grad:
        _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise OpError("concat: empty input list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    out = Tensor(data, requires_grad=_tracked(*ts))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        _record(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def slice_(a, key) -> Tensor:
    """Basic slicing; ``key`` is a slice or tuple of slices/ints."""
    a = _as_tensor(a)
    data = a.data[key]
    out = Tensor(data, requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            gx = np.zeros_like(a.data)
            gx[key] = g
            return (gx,)

        _record(out, (a,), vjp)
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (V,D) table by an integer id array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise OpError(f"embedding_lookup: id out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)
    if out.requires_grad:

        def vjp(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            return (gt,)

        _record(out, (table,), vjp)
    return out


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; norms below ``eps`` are clamped."""
    a = _as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    y = a.data / d
    out = Tensor(y, requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            live = n > eps
            dot = (g * a.data).sum(axis=axis, keepdims=True)
            gx = np.where(live, g / d - a.data * dot / (d * d * d), g / eps)
            return (gx,)

        _record(out, (a,), vjp)
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        _record(out, (a,), vjp)
    return out


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    if out.requires_grad:

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, a.shape).copy(),)

        _record(out, (a,), vjp)
    return out


CATALOG = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "mean_pool_spatial": mean_pool_spatial,
    "bilinear_upsample": bilinear_upsample,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": slice_,
    "embedding_lookup": embedding_lookup,
    "l2_normalize": l2_normalize,
    "sum": sum_,
    "mean": mean_,
}


def forward(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch a catalog op by name."""
    if op not in CATALOG:
        raise OpError(f"unknown op {op!r}; catalog: {sorted(CATALOG)}")
    attrs = attrs or {}
    if op == "concat":
        return concat(list(inputs), **attrs)
    return CATALOG[op](*inputs, **attrs)


# ---------------------------------------------------------------------------
# finite-difference verification

# Per-op input samplers steer random draws away from kinks (relu at 0, the
# log domain boundary, degenerate norms).


def _gc_inputs(op: str, shapes, rng: np.random.Generator):
    xs = []
    for shape in shapes:
        x = rng.standard_normal(shape)
        if op == "relu":
            x = x + 0.2 * np.sign(x) + 0.01 * (x == 0)
        elif op == "log":
            x = np.abs(x) + 0.5
        elif op == "l2_normalize":
            x = x + 0.3 * np.sign(x) + 0.01 * (x == 0)
        xs.append(x)
    return xs


_GC_ATTRS = {
    "conv2d": {"stride": 1, "pad": 1},
    "softmax": {"axis": -1},
    "log": {"eps": 0.0},
    "bilinear_upsample": {"factor": 2},
    "concat": {"axis": 0},
    "slice": {"key": (slice(1, None), slice(None))},
    "transpose": {},
    "l2_normalize": {"axis": -1},
    "sum": {"axis": None},
    "mean": {"axis": None},
}


def grad_check(op: str, shapes, seed: int, attrs: dict | None = None, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in f64 with the given step; the caller applies its own pass threshold.
    Error metric per element: |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    if op not in CATALOG:
        raise OpError(f"unknown op {op!r}")
    if attrs is None:
        attrs = _GC_ATTRS.get(op, {})
    rng = np.random.default_rng(seed)

    if op == "embedding_lookup":
        table = rng.standard_normal(shapes[0])
        ids = rng.integers(0, shapes[0][0], size=shapes[1])
        raw_inputs = [table]
        build = lambda arrs: forward(op, [Tensor(arrs[0], "f64", requires_grad=True)], {"ids": ids})
    else:
        raw_inputs = _gc_inputs(op, shapes, rng)
        build = lambda arrs: forward(
            op, [Tensor(x, "f64", requires_grad=True) for x in arrs], attrs
        )

    probe = build(raw_inputs)
    r = rng.standard_normal(probe.shape)

    def scalar_loss(arrs):
        out = build(arrs)
        return out, sum_(mul(out, Tensor(r, "f64")))

    out, loss = scalar_loss(raw_inputs)
    # leaves are the direct inputs of `out`
    leaves = [p for p in out._parents if p.requires_grad]
    grad_map = backward(loss)
    analytic = [grad_map[p.tid] for p in leaves]

    max_err = 0.0
    for i, x in enumerate(raw_inputs):
        flat = x.reshape(-1)
        an = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            _, lp = scalar_loss(raw_inputs)
            flat[j] = orig - step
            _, lm = scalar_loss(raw_inputs)
            flat[j] = orig
            cd = (lp.item() - lm.item()) / (2 * step)
            err = abs(an[j] - cd) / max(abs(an[j]), abs(cd), 1e-8)
            max_err = max(max_err, err)
    return max_err


def finite_difference(fn, arrays, step: float = 1e-5):
    """Central-difference gradients of ``fn(arrays) -> scalar Tensor`` w.r.t. each array."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x, dtype=np.float64)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = fn(arrays).item()
            flat[j] = orig - step
            lm = fn(arrays).item()
            flat[j] = orig
            gflat[j] = (lp - lm) / (2 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic).reshape(-1), np.asarray(numeric).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# VLT1 container

MAGIC = b"VLT1"


def write_tensor(fh, array: np.ndarray) -> None:
    """Write one array: magic, u32 rank, u32 dims, u8 dtype tag, LE row-major payload."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", _TAG_OF[arr.dtype]))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    start = fh.tell()
    magic = fh.read(4)
    if magic != MAGIC:
        raise OpError(f"bad tensor magic {magic!r} at offset {start}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", fh.read(1))
    if tag not in _DTYPE_OF_TAG:
        raise OpError(f"bad dtype tag {tag} at offset {fh.tell() - 1}")
    dt = np.dtype(_DTYPE_OF_TAG[tag]).newbyteorder("<")
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise OpError(f"truncated tensor payload at offset {fh.tell()} (expected {count} values)")
    return np.frombuffer(payload, dtype=dt).astype(_DTYPE_OF_TAG[tag]).reshape(dims)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
