"""Dense float32 tensors with reverse-mode automatic differentiation.

Values are stored as contiguous row-major float32 arrays. Reductions,
matrix products and other accumulating kernels run their inner loops in
float64 before rounding the result back to float32, which keeps sums
stable at edge-device storage precision.

Differentiation is tape-based: while a :class:`Tape` is active, every
operation that touches a gradient-requiring tensor appends a node with a
backward rule. ``Tape.backward`` then replays the tape in reverse and can
return gradients for *any* recorded node, intermediates included, not
only leaf parameters. A tape may be replayed any number of times (one
backward pass per loss is the normal training pattern); replays are pure
and return identical maps as long as nothing mutates tensor data.

Broadcasting for elementwise binary ops is deliberately narrow: both
operands must have equal rank and every axis must either match or be 1
on one side; additionally a scalar (shape ``(1,)``) combines with
anything. Gradients of broadcast operands are summed back over the
expanded axes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "custom_op",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "tsum",
    "tmean",
    "relu",
    "exp",
    "log",
    "softmax",
    "clamp_min",
    "backward",
    "grad_l2_norm",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rule."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs (overflow is an error)."""


class TapeError(RuntimeError):
    """Invalid use of the differentiation tape."""


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """N-dimensional float32 value, optionally attached to the active tape.

    ``node`` is the tensor's id on the tape identified by ``tape_id``;
    a tensor reused on a later tape (parameters are, every step) is
    re-registered there as a fresh leaf. Tensors are treated as immutable
    during a taped forward pass; the optimizer mutates parameter ``data``
    in place only between steps, after the step's tape has been discarded.
    """

    __slots__ = ("data", "requires_grad", "node", "tape_id")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[int] = None
        self.tape_id: int = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{grad})"


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray([x], dtype=np.float32))


class _TapeEntry:
    """One recorded value: a leaf or the output of an op."""

    __slots__ = ("op", "inputs", "backward_fn", "shape")

    def __init__(self, op, inputs, backward_fn, shape):
        self.op = op
        self.inputs = inputs          # tuple of node ids
        self.backward_fn = backward_fn  # fn(g: float64 array) -> per-input grads, or None for leaves
        self.shape = shape


_state = threading.local()
_tape_counter = 0
_tape_counter_lock = threading.Lock()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Recording of one forward pass; one active tape per thread.

    Append-only and topologically ordered by construction: an op's
    inputs always receive ids before its output.
    """

    def __init__(self):
        global _tape_counter
        with _tape_counter_lock:
            _tape_counter += 1
            self.tape_id = _tape_counter
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def _register(self, t: Tensor) -> int:
        if t.tape_id == self.tape_id and t.node is not None:
            return t.node
        idx = len(self.entries)
        self.entries.append(_TapeEntry("leaf", (), None, t.data.shape))
        t.node = idx
        t.tape_id = self.tape_id
        return idx

    def _record(self, op: str, input_ids: tuple, out: Tensor, backward_fn) -> None:
        idx = len(self.entries)
        self.entries.append(_TapeEntry(op, input_ids, backward_fn, out.data.shape))
        out.node = idx
        out.tape_id = self.tape_id

    def backward(self, loss: Tensor, targets: Iterable) -> "GradientMap":
        """Reverse-accumulate d(loss)/d(target) for every requested node.

        ``targets`` may mix Tensors and raw node ids. Targets that do not
        influence the loss receive zero gradients of matching shape.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.tape_id != self.tape_id:
            raise TapeError("loss is not recorded on this tape")

        target_ids = []
        for t in targets:
            if isinstance(t, Tensor):
                if t.tape_id != self.tape_id:
                    raise TapeError(f"backward target {t!r} is not on this tape")
                nid = t.node
            else:
                nid = t
            if not isinstance(nid, (int, np.integer)) or nid is True or nid is False:
                raise TapeError(f"invalid backward target: {t!r}")
            if nid is None or not (0 <= nid < len(self.entries)):
                raise TapeError(f"backward target {t!r} is not on this tape")
            target_ids.append(int(nid))

        # float64 accumulation buffers, one per reached node
        buffers: dict[int, np.ndarray] = {
            loss.node: np.ones(self.entries[loss.node].shape, dtype=np.float64)
        }
        for idx in range(loss.node, -1, -1):
            g = buffers.get(idx)
            if g is None:
                continue
            entry = self.entries[idx]
            if entry.backward_fn is None:
                continue
            contribs = entry.backward_fn(g)
            for input_id, contrib in zip(entry.inputs, contribs):
                if contrib is None:
                    continue
                buf = buffers.get(input_id)
                if buf is None:
                    buffers[input_id] = np.asarray(contrib, dtype=np.float64).copy()
                else:
                    buf += contrib

        grads = {}
        for nid in target_ids:
            buf = buffers.get(nid)
            if buf is None:
                buf = np.zeros(self.entries[nid].shape, dtype=np.float64)
            grads[nid] = Tensor(buf.astype(np.float32))
        return GradientMap(grads)


def backward(loss: Tensor, targets: Iterable) -> "GradientMap":
    """Backward pass on the active tape (see :meth:`Tape.backward`)."""
    tape = _active_tape()
    if tape is None:
        raise TapeError("no active tape")
    return tape.backward(loss, targets)


class GradientMap:
    """Node id -> gradient tensor, as returned by a backward pass."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def _key(self, key) -> int:
        nid = key.node if isinstance(key, Tensor) else key
        return nid if nid is not None else -1

    def __getitem__(self, key) -> Tensor:
        nid = self._key(key)
        if nid not in self._grads:
            raise KeyError(f"node {nid} not present in gradient map")
        return self._grads[nid]

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


def grad_l2_norm(grads: GradientMap, node) -> float:
    """sqrt of the sum of squared gradient entries for one node (float64 sum)."""
    g = grads[node].data
    return float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))


# ---------------------------------------------------------------------------
# op plumbing

def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def custom_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Record an externally implemented primitive on the active tape.

    ``backward_fn`` receives the float64 output gradient and must return
    one gradient array (or None) per input, each matching that input's
    shape. This is the extension point used by the layer library for
    fused kernels (convolution, batch norm, losses).
    """
    out_arr = np.ascontiguousarray(out_data, dtype=np.float32)
    _check_finite(op, out_arr)
    out = Tensor(out_arr, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        ids = tuple(tape._register(t) for t in inputs)
        tape._record(op, ids, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to a broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == (1,):
        return np.sum(grad, dtype=np.float64).reshape(1)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    return np.sum(grad, axis=axes, keepdims=True, dtype=np.float64)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return np.broadcast_shapes(sa, sb)
    if sa == (1,) or sb == (1,):
        return sa if sb == (1,) else sb
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {list(sa)} vs {list(sb)}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {list(sa)} and {list(sb)} do not broadcast")
    return np.broadcast_shapes(sa, sb)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return custom_op("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return custom_op("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return custom_op("mul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with float64 inner accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {list(a.shape)} vs {list(b.shape)}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = a64 @ b64

    def bwd(g):
        return g @ b64.T, a64.T @ g

    return custom_op("matmul", (a, b), out, bwd)


def transpose(a: Tensor) -> Tensor:
    """2-D transpose (materialized; reshape never reorders, this does)."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {list(a.shape)}")
    out = np.ascontiguousarray(a.data.T)

    def bwd(g):
        return (g.T,)

    return custom_op("transpose", (a,), out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; a pure relabeling that never copies or reorders."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    out = a.data.reshape(shape)
    in_shape = a.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return custom_op("reshape", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op("concat", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation; scalar results have shape (1,))

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_n = _norm_axis(axis, a.data.ndim)
    out64 = np.sum(a.data, axis=axis_n, keepdims=keepdims, dtype=np.float64)
    in_shape = a.data.shape
    if axis_n is None:
        out64 = out64.reshape(1)

    def bwd(g):
        if axis_n is None:
            return (np.broadcast_to(g.reshape(()), in_shape),)
        gg = g if keepdims else np.expand_dims(g, axis_n)
        return (np.broadcast_to(gg, in_shape),)

    return custom_op("sum", (a,), out64, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_n = _norm_axis(axis, a.data.ndim)
    out64 = np.mean(a.data, axis=axis_n, keepdims=keepdims, dtype=np.float64)
    in_shape = a.data.shape
    if axis_n is None:
        count = a.data.size
        out64 = out64.reshape(1)
    else:
        count = int(np.prod([in_shape[i] for i in axis_n]))

    def bwd(g):
        if axis_n is None:
            return (np.broadcast_to(g.reshape(()) / count, in_shape),)
        gg = g if keepdims else np.expand_dims(g, axis_n)
        return (np.broadcast_to(gg / count, in_shape),)

    return custom_op("mean", (a,), out64, bwd)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return custom_op("relu", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.data)
        except FloatingPointError:
            raise NonFiniteError("exp overflowed") from None

    def bwd(g):
        return (g * out,)

    return custom_op("exp", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    """Natural log. Inputs must be strictly positive; clamp first if unsure."""
    if np.any(a.data <= 0.0):
        raise ShapeError("log of non-positive input; apply clamp_min first")
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return custom_op("log", (a,), out, bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, np.float32(floor))
    mask = a.data >= floor

    def bwd(g):
        return (g * mask,)

    return custom_op("clamp_min", (a,), out, bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max subtraction along ``axis``."""
    x = a.data.astype(np.float64)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return custom_op("softmax", (a,), s, bwd)
