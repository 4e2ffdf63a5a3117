"""Dense tensors with a recorded computation history.

Every operation on a :class:`Tensor` that depends on something requiring a
gradient produces a node holding its parents and a backward rule.  Backward
rules are written with the same recorded primitives, so a backward pass run
while recording is itself differentiable.  That is what makes second-order
meta-gradients possible.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, StructuralError

_ids = itertools.count()


class _State(threading.local):
    def __init__(self):
        self.recording = True
        self.depth = 0
        self.check_numerics = False
        self.records = []
        self.default_dtype = np.float32


_state = _State()


def get_default_dtype():
    return _state.default_dtype


def set_default_dtype(dtype):
    _state.default_dtype = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    previous = _state.default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.default_dtype = previous


def is_recording():
    """True while new operations are being recorded (including inside a
    differentiable backward pass)."""
    return _state.recording


@contextmanager
def no_record():
    """Evaluate operations without building graph nodes."""
    previous = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


@contextmanager
def _backward_scope(create_graph):
    prev = (_state.recording, _state.depth)
    _state.recording = create_graph
    _state.depth = prev[1] + 1 if create_graph else prev[1]
    try:
        yield
    finally:
        _state.recording, _state.depth = prev


@contextmanager
def check_numerics(enabled=True):
    """Raise :class:`NumericError` at the first node producing NaN/Inf."""
    previous = _state.check_numerics
    _state.check_numerics = enabled
    try:
        yield
    finally:
        _state.check_numerics = previous


def set_check_numerics(enabled):
    _state.check_numerics = bool(enabled)


@dataclass
class NodeInfo:
    index: int
    kind: str
    inputs: tuple
    depth: int


@dataclass
class ComputationRecord:
    """Append-only log of the nodes created while the record is active.

    ``depth`` of a node is 0 for ordinary forward operations and 1 for
    operations created by a backward pass that was itself recorded
    (``create_graph=True``).  Only bookkeeping is stored; values live on the
    tensors.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _state.records.append(self)
        return self

    def __exit__(self, *exc):
        _state.records.remove(self)
        return False

    @property
    def max_depth(self):
        return max((n.depth for n in self.nodes), default=0)

    @property
    def has_higher_order(self):
        return any(n.depth > 0 for n in self.nodes)

    def count(self, kind=None, depth=None):
        return sum(
            1 for n in self.nodes
            if (kind is None or n.kind == kind) and (depth is None or n.depth == depth)
        )

    def is_topological(self):
        seen = set()
        for n in self.nodes:
            if any(i >= n.index for i in n.inputs):
                return False
            seen.add(n.index)
        return True


class Tensor:
    """An n-dimensional array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_id", "kind")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_state.default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.kind = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic ---------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    @property
    def T(self):
        return transpose(self)


def _make(kind, data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out._id = next(_ids)
    out.kind = kind
    if _state.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        for rec in _state.records:
            rec.nodes.append(
                NodeInfo(out._id, kind, tuple(p._id for p in parents), _state.depth)
            )
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if _state.check_numerics and not np.all(np.isfinite(data)):
        raise NumericError(
            f"non-finite output from '{kind}' (node #{out._id})",
            {"kind": kind, "node": out._id},
        )
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return Tensor(a), Tensor(b)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise StructuralError(
            f"{kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def backward(out, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def backward(out, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return scale(a, b)
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return scale(b, a)
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward(out, g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def backward(out, g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make("div", a.data / b.data, (a, b), backward)


def neg(a):
    return _make("neg", -a.data, (a,), lambda out, g, needs: (neg(g),))


def scale(a, c):
    """Multiply by a constant Python scalar."""
    c = float(c)
    return _make(
        "scale", a.data * a.dtype.type(c), (a,),
        lambda out, g, needs: (scale(g, c),),
    )


def exp(a):
    return _make("exp", np.exp(a.data), (a,), lambda out, g, needs: (mul(g, out),))


def log(a):
    return _make("log", np.log(a.data), (a,), lambda out, g, needs: (div(g, a),))


def rsqrt(a):
    """Elementwise ``a ** -0.5``."""

    def backward(out, g, needs):
        return (scale(mul(g, mul(out, mul(out, out))), -0.5),)

    return _make("rsqrt", 1.0 / np.sqrt(a.data), (a,), backward)


def relu(a):
    def backward(out, g, needs):
        mask = (a.data > 0).astype(a.dtype)
        if not _state.recording:
            return (Tensor(g.data * mask),)
        return (mul(g, Tensor(mask)),)

    return _make("relu", np.maximum(a.data, 0), (a,), backward)


def stop_gradient(t):
    """Same values, treated as a constant by :func:`gradients`."""
    return Tensor(t.data)


# shape plumbing -----------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise StructuralError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", data, (a,), lambda out, g, needs: (reshape(g, a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        "transpose", np.transpose(a.data, axes), (a,),
        lambda out, g, needs: (transpose(g, inverse),),
    )


def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise StructuralError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _make(
        "broadcast_to", data, (a,), lambda out, g, needs: (sum_to(g, a.shape),)
    )


def reduce_sum(data, axes, keepdims=False):
    """``data.sum(axes)``; a sum over leading axes of a contiguous float
    array goes through a BLAS gemv, which is much faster than ufunc reduce."""
    axes = tuple(axes)
    k = len(axes)
    if (0 < k < data.ndim and axes == tuple(range(k)) and data.flags.c_contiguous
            and data.dtype.kind == "f"):
        m = int(np.prod(data.shape[:k]))
        out = np.ones(m, dtype=data.dtype) @ data.reshape(m, -1)
        out = out.reshape(data.shape[k:])
        return out.reshape((1,) * k + out.shape) if keepdims else out
    return data.sum(axis=axes, keepdims=keepdims)


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (undo broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1
    )
    data = reduce_sum(a.data, axes, keepdims=True) if axes else a.data
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    return _make("sum_to", data, (a,), lambda out, g, needs: (broadcast_to(g, a.shape),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    data = reduce_sum(a.data, axes, keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(out, g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make("sum", np.asarray(data), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise StructuralError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(out, g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make("matmul", a.data @ b.data, (a, b), backward)


# softmax family -----------------------------------------------------------

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out, g, needs):
        inner = tsum(mul(g, out), axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _make("softmax", data, (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(out, g, needs):
        return (sub(g, mul(exp(out), tsum(g, axis, keepdims=True))),)

    return _make("log_softmax", data, (a,), backward)
