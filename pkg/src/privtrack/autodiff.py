"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing vector-Jacobian products. :func:`backward` walks the
recorded nodes in exact reverse creation order, which is a valid
topological order because a node can only be built from older nodes.

The engine is sized for small MLPs and a couple of attention layers; there
are no views, strides or in-place ops on graph values.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_recording = [True]

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node in the differentiation graph.

    ``data`` is always a float64 ndarray. Leaves with ``requires_grad`` get
    their ``grad`` slot filled by :func:`backward`; intermediate nodes do not
    retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return _constant(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A sum is a cheap screen; only confirm element-wise if it trips.
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op}")


def _constant(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t.node_id = next(_node_ids)
    t._parents = ()
    t._vjp = None
    t.op = "const"
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _constant(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.node_id = next(_node_ids)
    t.op = op
    if _recording[0] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (inference)."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, so finite differences behave)."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + GELU_K * x2))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _node(out, (x,), vjp, "gelu")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), vjp, "tanh")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul (binary) or relu, gelu, tanh (unary)."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "gelu": gelu, "tanh": tanh}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# contraction ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    With a 2-D right operand and ``m > 1`` the batch is folded into one
    GEMM. When ``m == 1`` every row is its own small product, which keeps
    row results independent of where the row sits in the batch (GEMM
    kernels treat edge blocks differently, so folding would not be).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    k = ad.shape[-1]
    fold = bd.ndim == 2 and ad.ndim > 2 and ad.shape[-2] > 1
    if fold:
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if fold:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


# reductions and shape ops ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), vjp, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(out, (x,), vjp, "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return (unbroadcast(g, x.shape),)

    return _node(out, (x,), vjp, "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), vjp, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != ts[0].shape[:axis] + ts[0].shape[axis + 1:]:
            raise ShapeError(f"concat along {axis}: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, vjp, "concat")


def broadcast_concat(z, e) -> Tensor:
    """Pair every row of ``z`` with every row of ``e``.

    ``z: [..., H, d]`` and ``e: [..., Np, d]`` give ``[..., H, Np, 2d]`` with
    ``out[..., h, j, :d] = z[..., h, :]`` and ``out[..., h, j, d:] = e[..., j, :]``.
    """
    z, e = as_tensor(z), as_tensor(e)
    if z.ndim < 2 or e.ndim < 2 or z.shape[-1] != e.shape[-1]:
        raise ShapeError(f"broadcast_concat: feature widths differ, z{z.shape} vs e{e.shape}")
    if z.shape[:-2] != e.shape[:-2]:
        raise ShapeError(f"broadcast_concat: batch dims differ, z{z.shape} vs e{e.shape}")
    batch = z.shape[:-2]
    H, d = z.shape[-2:]
    Np = e.shape[-2]
    out = np.empty(batch + (H, Np, 2 * d))
    out[..., :d] = z.data[..., :, None, :]
    out[..., d:] = e.data[..., None, :, :]

    def vjp(g):
        return g[..., :d].sum(axis=-2), g[..., d:].sum(axis=-3)

    return _node(out, (z, e), vjp, "broadcast_concat")


# normalisation / attention --------------------------------------------------

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _node(out, (x, gain, bias), vjp, "layer_norm")


def attention(q, k, v, mask=None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d) + bias) v``.

    ``mask`` is a boolean ``[Tq, Tk]`` matrix (True = may attend); disallowed
    pairs get a bias of -inf. Leading batch/head dims broadcast.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape} are incompatible")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape[-2:]:
            raise ShapeError(f"attention mask {mask.shape} does not match scores {scores.shape[-2:]}")
        dead = ~mask.any(axis=-1)
        if dead.any():
            raise ValueError(f"attention: query rows {np.flatnonzero(dead).tolist()} have no allowed key")
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def vjp(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape)
        if q.requires_grad or k.requires_grad:
            gp = g @ np.swapaxes(v.data, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = unbroadcast(gs @ k.data, q.shape)
            if k.requires_grad:
                gk = unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape)
        return gq, gk, gv

    return _node(out, (q, k, v), vjp, "attention")


# losses ---------------------------------------------------------------------

def l1_loss(pred, target) -> Tensor:
    """Mean absolute error. The subgradient at an exact tie is 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _node(np.asarray(np.abs(diff).mean()), (pred, target), vjp, "l1_loss")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        s = diff * (2.0 * g / n)
        return s, -s

    return _node(np.asarray((diff * diff).mean()), (pred, target), vjp, "mse_loss")


# backward -------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them (``adam_step`` does)
    before the next pass.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.node_id in nodes:
            continue
        nodes[n.node_id] = n
        stack.extend(p for p in n._parents if p.requires_grad and p.node_id not in nodes)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        g = grads.pop(nid, None)
        if g is None:
            continue
        n = nodes[nid]
        if n._vjp is None:
            n.grad = g.copy() if n.grad is None else n.grad + g
            continue
        for parent, pg in zip(n._parents, n._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.node_id
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
