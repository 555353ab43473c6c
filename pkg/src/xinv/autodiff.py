"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Graph` is a tape: every primitive executed while a graph is active appends
one node, and `backward` replays the tape in exact reverse construction order,
accumulating gradients additively into the input tensors.  Outside an active
graph the primitives run in plain inference mode and record nothing.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes, and the only mixed-shape primitives are the explicitly named
`add_bias` / `add_channel_bias` and scalar ops.
"""

from __future__ import annotations

import struct
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested op."""


class DomainError(ValueError):
    """Operand values are outside the op's mathematical domain."""


class GraphError(RuntimeError):
    """Backward invoked on a malformed or detached graph."""


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "out", "backward_fn")

    def __init__(self, op, out, backward_fn):
        self.op = op
        self.out = out
        self.backward_fn = backward_fn


_local = threading.local()


def _graph_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Graph:
    """Tape of op records in construction order; one thread, one owner."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()
        return False

    @staticmethod
    def current():
        stack = _graph_stack()
        return stack[-1] if stack else None


def _record(op, inputs, out, backward_fn):
    """Append a node if a graph is active and any input requires grad."""
    g = Graph.current()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append(_Node(op, out, backward_fn))
    return out


def backward(graph, loss):
    """Populate dLoss/dLeaf for every requires_grad tensor reachable from loss.

    Gradients for one pass are accumulated in pass-local buffers (so fan-out
    paths sum) and then added onto each tensor's grad slot; repeated calls
    without zeroing therefore accumulate one full gradient per call.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not any(node.out is loss for node in graph.nodes):
        raise GraphError("backward: loss tensor was not produced by this graph")
    local = {}  # id(tensor) -> (tensor, grad buffer)

    def acc(tensor, g):
        entry = local.get(id(tensor))
        if entry is None:
            local[id(tensor)] = [tensor, np.zeros_like(tensor.data) + g]
        else:
            entry[1] = entry[1] + g

    acc(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        entry = local.get(id(node.out))
        if entry is not None:
            node.backward_fn(entry[1], acc)
    for tensor, g in local.values():
        tensor.accumulate_grad(g)


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul", "expects 2-d operands")
    _check(
        a.shape[1] == b.shape[0],
        "matmul",
        f"inner dims differ: {a.shape} @ {b.shape}",
    )
    out = Tensor(a.data @ b.data)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)

    return _record("matmul", (a, b), out, bwd)


def _corr2d(x, k):
    """Stride-1 same-padding cross-correlation, x:(N,C,H,W) k:(O,C,kh,kw)."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,c,h,w,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * kh * kw)
    out = cols @ k.reshape(o, -1).T  # n, hw, o
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, o, h, w)), cols


def conv2d(x, k):
    """Stride-1, zero-padded 'same' convolution. x: NCHW, k: OIHW, odd kernel."""
    _check(x.data.ndim == 4, "conv2d", f"input must be NCHW, got shape {x.shape}")
    _check(k.data.ndim == 4, "conv2d", f"kernel must be OIHW, got shape {k.shape}")
    _check(
        x.shape[1] == k.shape[1],
        "conv2d",
        f"channel mismatch: input C={x.shape[1]}, kernel I={k.shape[1]}",
    )
    _check(
        k.shape[2] % 2 == 1 and k.shape[3] % 2 == 1,
        "conv2d",
        f"kernel extents must be odd for same padding, got {k.shape[2:]}",
    )
    y, cols = _corr2d(x.data, k.data)
    out = Tensor(y)

    def bwd(g, acc):
        n, o, h, w = g.shape
        if k.requires_grad:
            go = np.ascontiguousarray(g.reshape(n, o, h * w).transpose(1, 0, 2)).reshape(o, -1)
            gk = go @ cols.reshape(-1, cols.shape[2])
            acc(k, gk.reshape(k.shape))
        if x.requires_grad:
            # full correlation of upstream grad with the rotated kernel
            k_rot = k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _corr2d(g, k_rot)
            acc(x, gx)

    return _record("conv2d", (x, k), out, bwd)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g * (x.data > 0.0))

    return _record("relu", (x,), out, bwd)


def sigmoid(x):
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s)

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g * s * (1.0 - s))

    return _record("sigmoid", (x,), out, bwd)


def log(x):
    if np.any(x.data <= 0.0):
        raise DomainError("log: all inputs must be strictly positive")
    out = Tensor(np.log(x.data))

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g / x.data)

    return _record("log", (x,), out, bwd)


def add(a, b):
    _check(a.shape == b.shape, "add", f"shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, g)
        if b.requires_grad:
            acc(b, g)

    return _record("add", (a, b), out, bwd)


def mul(a, b):
    _check(a.shape == b.shape, "mul", f"shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, g * b.data)
        if b.requires_grad:
            acc(b, g * a.data)

    return _record("mul", (a, b), out, bwd)


def scale(x, c):
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g * c)

    return _record("scale", (x,), out, bwd)


def add_scalar(x, c):
    c = float(c)
    out = Tensor(x.data + c)

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g)

    return _record("add_scalar", (x,), out, bwd)


def add_bias(x, b):
    _check(x.data.ndim == 2 and b.data.ndim == 1, "add_bias", "expects (N,K) and (K,)")
    _check(
        x.shape[1] == b.shape[0],
        "add_bias",
        f"width mismatch: {x.shape} vs {b.shape}",
    )
    out = Tensor(x.data + b.data)

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g)
        if b.requires_grad:
            acc(b, g.sum(axis=0))

    return _record("add_bias", (x, b), out, bwd)


def add_channel_bias(x, b):
    _check(x.data.ndim == 4 and b.data.ndim == 1, "add_channel_bias", "expects NCHW and (C,)")
    _check(
        x.shape[1] == b.shape[0],
        "add_channel_bias",
        f"channel mismatch: {x.shape} vs {b.shape}",
    )
    out = Tensor(x.data + b.data[:, None, None])

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g)
        if b.requires_grad:
            acc(b, g.sum(axis=(0, 2, 3)))

    return _record("add_channel_bias", (x, b), out, bwd)


def avg_pool2(x):
    """2x2 average pooling with stride 2; H and W must be even."""
    _check(x.data.ndim == 4, "avg_pool2", f"input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    _check(h % 2 == 0 and w % 2 == 0, "avg_pool2", f"H,W must be even, got {h}x{w}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def bwd(g, acc):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            acc(x, gx)

    return _record("avg_pool2", (x,), out, bwd)


def global_avg_pool(x):
    """NCHW -> (N,C) mean over the spatial extent."""
    _check(x.data.ndim == 4, "global_avg_pool", f"input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _record("global_avg_pool", (x,), out, bwd)


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g * mask)

    return _record("clip", (x,), out, bwd)


def sum_all(x):
    out = Tensor(np.array(x.data.sum()))

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, np.broadcast_to(g, x.shape).copy())

    return _record("sum_all", (x,), out, bwd)


def gradient_reversal(x, lam):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0.0:
        raise DomainError(f"gradient_reversal: lambda must be finite and >= 0, got {lam}")
    out = Tensor(x.data.copy())

    def bwd(g, acc):
        if x.requires_grad:
            acc(x, g * (-lam))

    return _record("gradient_reversal", (x,), out, bwd)


# ---------------------------------------------------------------------------
# serialization: magic "XTNS", u32 rank, rank x u64 extents, row-major f64,
# all little-endian

_MAGIC = b"XTNS"


def write_tensor(fh, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh):
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic: {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    if data.size != count:
        raise ValueError("truncated tensor payload")
    return data.reshape(shape)


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)
