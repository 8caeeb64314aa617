"""Minimal float32 tensor library with reverse-mode autodiff on an explicit tape.

Tensors wrap contiguous row-major float32 numpy buffers. Ops validate shapes
up front and raise ShapeError naming the op and the offending shapes; silent
broadcasting is limited to numpy's right-aligned rules (scalars, trailing
suffixes like a (C,) bias against (B,T,C), and per-channel (C,1,1) maps
against NCHW feature maps).

Recording is explicit: ops append to the innermost active GradientTape, in
execution order, whenever an input requires a gradient. `backward` walks the
tape once in reverse and returns a gradient per watched parameter. Disjoint
tapes are independent, so batch-parallel evaluation with a fixed reduction
order stays deterministic.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


_uid_counter = itertools.count()
_tls = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float32 n-d array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "uid", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)
        self.tape_id: int | None = None

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return mul(_ensure(other), self)

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __truediv__(self, other):
        return div(self, _ensure(other))

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    out_uid: int
    input_uids: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass
class GradientTape:
    """Append-only op record; append order is the topological order."""

    nodes: list[Node] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)
    watched: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def _record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        for t in inputs:
            if t.requires_grad and t.uid not in self._produced:
                self.watched[t.uid] = t
        out.tape_id = len(self.nodes)
        self._produced.add(out.uid)
        self.nodes.append(Node(kind, out.uid, tuple(t.uid for t in inputs), vjp))


def _maybe_record(kind: str, out: Tensor, inputs: Sequence[Tensor], vjp_builder) -> Tensor:
    tape = _active_tape()
    tracked = any(t.requires_grad for t in inputs)
    if tape is not None and not tracked:
        tracked = any(t.uid in tape._produced for t in inputs)
    out.requires_grad = tracked
    if tape is not None and tracked:
        tape._record(kind, out, inputs, vjp_builder())
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep over the tape; returns {parameter uid: gradient Tensor}.

    The loss must be a scalar recorded on the tape. Parameters that the loss
    does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if loss.uid not in tape._produced:
        raise ValueError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones(loss.shape, dtype=np.float32)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_uid, None)
        if g is None:
            continue
        for uid, gi in zip(node.input_uids, node.vjp(g)):
            if gi is None:
                continue
            acc = grads.get(uid)
            grads[uid] = gi if acc is None else acc + gi
    out = {}
    for uid, t in tape.watched.items():
        g = grads.get(uid)
        out[uid] = Tensor(g if g is not None else np.zeros_like(t.data))
    return out


def grads_for(tape: GradientTape, loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients aligned with `params`; parameters the loss never touched
    (e.g. branches skipped this step) get zeros."""
    gmap = backward(tape, loss)
    return [
        gmap.get(p.uid, Tensor(np.zeros_like(p.data)))
        for p in params
    ]


# ---------------------------------------------------------------------------
# shape utilities
# ---------------------------------------------------------------------------


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    for da, db in zip(sa[::-1], sb[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{kind}: shapes {list(sa)} and {list(sb)} do not align")


def _contig(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray silently promotes 0-d to 1-d; keep 0-d intact
    return a if a.ndim == 0 else np.ascontiguousarray(a)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return _contig(g.reshape(shape))


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.data, b.data)
    out = Tensor(a.data + b.data)

    def vjp_builder():
        sa, sb = a.shape, b.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _maybe_record("add", out, (a, b), vjp_builder)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a.data, b.data)
    out = Tensor(a.data * b.data)

    def vjp_builder():
        da, db, sa, sb = a.data, b.data, a.shape, b.shape
        return lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb))

    return _maybe_record("mul", out, (a, b), vjp_builder)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    """a ** c for a constant exponent; covers division and inverse roots."""
    out = Tensor(a.data**exponent)

    def vjp_builder():
        da = a.data
        c = exponent
        return lambda g: (g * (c * da ** (c - 1.0)),)

    return _maybe_record("pow_const", out, (a,), vjp_builder)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul(b, Tensor(-1.0)))

def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, pow_const(b, -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul: need 2-d operands, got {list(da.shape)} @ {list(db.shape)}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ: {list(da.shape)} @ {list(db.shape)}")
    if db.ndim > 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(
            f"matmul: batch dims differ: {list(da.shape)} @ {list(db.shape)}"
        )
    out = Tensor(da @ db)

    def vjp_builder():
        def vjp(g):
            ga = g @ db.swapaxes(-1, -2)
            if db.ndim == 2 and da.ndim > 2:
                gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = da.swapaxes(-1, -2) @ g
            return ga, gb

        return vjp

    return _maybe_record("matmul", out, (a, b), vjp_builder)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution, weights (F, C, KH, KW). No bias; add one separately."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d operands, got {list(x.shape)}, {list(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}"
        )
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {list(w.shape)} larger than padded input {list(x.shape)}")
    y, cols = kernels.conv2d_forward_with_cols(x.data, w.data, stride, pad)
    out = Tensor(y)

    def vjp_builder():
        dx, dw = x.data, w.data
        return lambda g: kernels.conv2d_backward(g, dx, dw, stride, pad, cols_t=cols)

    return _maybe_record("conv2d", out, (x, w), vjp_builder)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    out = Tensor(x.data.reshape(shape))

    def vjp_builder():
        orig = x.shape
        return lambda g: (_contig(g.reshape(orig)),)

    return _maybe_record("reshape", out, (x,), vjp_builder)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {list(axes)} invalid for shape {list(x.shape)}")
    out = Tensor(x.data.transpose(axes))

    def vjp_builder():
        inv = tuple(np.argsort(axes))
        return lambda g: (_contig(g.transpose(inv)),)

    return _maybe_record("transpose", out, (x,), vjp_builder)


def slice_(x: Tensor, key: tuple) -> Tensor:
    """Slice with unit steps; key is a tuple of python slices, one per axis."""
    if len(key) != x.ndim:
        raise ShapeError(f"slice: got {len(key)} slices for {x.ndim}-d tensor")
    for s in key:
        if not isinstance(s, slice) or s.step not in (None, 1):
            raise ShapeError("slice: only unit-step slices are supported")
    out = Tensor(x.data[key])

    def vjp_builder():
        orig = x.shape
        return lambda g: (_scatter_slice(g, orig, key),)

    return _maybe_record("slice", out, (x,), vjp_builder)


def _scatter_slice(g, shape, key):
    gx = np.zeros(shape, dtype=np.float32)
    gx[key] = g
    return gx


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat: need at least one input")
    axis = axis % xs[0].ndim
    base = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError(f"concat: shape {other} does not match {base} off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))

    def vjp_builder():
        sizes = [t.shape[axis] for t in xs]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(
            _contig(part) for part in np.split(g, splits, axis=axis)
        )

    return _maybe_record("concat", out, tuple(xs), vjp_builder)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp_builder():
        orig = x.shape
        return lambda g: (_spread(g, orig, axes, keepdims),)

    return _maybe_record("sum", out, (x,), vjp_builder)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) or 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp_builder():
        orig = x.shape
        return lambda g: (_spread(g, orig, axes, keepdims) / np.float32(count),)

    return _maybe_record("mean", out, (x,), vjp_builder)


def _spread(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return _contig(np.broadcast_to(g, shape))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def vjp_builder():
        y = out.data
        return lambda g: (g * y,)

    return _maybe_record("exp", out, (x,), vjp_builder)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def vjp_builder():
        d = x.data
        return lambda g: (g / d,)

    return _maybe_record("log", out, (x,), vjp_builder)


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))

    def vjp_builder():
        y = out.data
        return lambda g: (g * (0.5 / y),)

    return _maybe_record("sqrt", out, (x,), vjp_builder)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))

    def vjp_builder():
        y = out.data
        return lambda g: (g * (1.0 - y * y),)

    return _maybe_record("tanh", out, (x,), vjp_builder)


_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT2PI = np.float32(0.3989422804014327)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = Tensor(d * cdf)

    def vjp_builder():
        def vjp(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
            return (g * (cdf + d * pdf),)

        return vjp

    return _maybe_record("gelu", out, (x,), vjp_builder)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp_builder():
        def vjp(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        return vjp

    return _maybe_record("softmax", out, (x,), vjp_builder)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0, variance 1. Affine params live outside."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    var = d.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (d - mu) * inv
    out = Tensor(y)

    def vjp_builder():
        def vjp(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return ((g - gm - y * gy) * inv,)

        return vjp

    return _maybe_record("layer_norm", out, (x,), vjp_builder)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """take_along_axis: indices has x.ndim dims, matching x off the gather axis."""
    idx = np.asarray(indices)
    if idx.ndim != x.ndim:
        raise ShapeError(
            f"gather: indices ndim {idx.ndim} != tensor ndim {x.ndim}"
        )
    axis = axis % x.ndim
    out = Tensor(np.take_along_axis(x.data, idx, axis=axis))

    def vjp_builder():
        orig = x.shape

        def vjp(g):
            gx = np.zeros(orig, dtype=np.float32)
            grids = list(np.indices(idx.shape))
            grids[axis] = idx
            np.add.at(gx, tuple(grids), g)
            return (gx,)

        return vjp

    return _maybe_record("gather", out, (x,), vjp_builder)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, D), integer ids of any shape -> ids.shape + (D,)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {list(table.shape)}")
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            f"embedding: ids out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    flat = ids.reshape(-1)
    out = Tensor(table.data[flat].reshape(ids.shape + (table.shape[1],)))

    def vjp_builder():
        vshape = table.shape

        def vjp(g):
            gt = np.zeros(vshape, dtype=np.float32)
            np.add.at(gt, flat, g.reshape(len(flat), vshape[1]))
            return (gt,)

        return vjp

    return _maybe_record("embedding", out, (table,), vjp_builder)


# ---------------------------------------------------------------------------
# composites (built from primitives; no new tape kinds)
# ---------------------------------------------------------------------------


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) onto the unit sphere."""
    sq = sum_(square(x), axis=-1, keepdims=True)
    return mul(x, pow_const(add(sq, Tensor(eps)), -0.5))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # max shift is a constant; its gradient contributions cancel exactly
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    shifted = sub(x, shift)
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer targets along the class axis."""
    lp = log_softmax(logits, axis=axis)
    idx = np.expand_dims(np.asarray(targets, dtype=np.int64), axis=axis)
    picked = gather(lp, idx, axis=axis)
    return mul(mean(picked), Tensor(-1.0))


def mse(a: Tensor, b: Tensor) -> Tensor:
    return mean(square(sub(a, b)))


# Generic dispatch used by tests and debugging tools; the named functions are
# the primary API.
_OPS = {
    "add": add,
    "mul": mul,
    "pow_const": pow_const,
    "matmul": matmul,
    "conv2d": conv2d,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "concat": concat,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "gelu": gelu,
    "softmax": softmax,
    "layer-normalize": layer_norm,
    "gather": gather,
    "embedding-lookup": embedding,
}


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by kind name. Unknown kinds raise ShapeError."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ShapeError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)
