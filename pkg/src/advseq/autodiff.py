"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a float32/float64 ndarray. While a ``GradTape`` is active,
differentiable ops append nodes to it in execution order; ``tape.backward``
replays that list in reverse (a Wengert list, so each node is visited exactly
once, in reverse topological order) and accumulates gradients.

Gradient policy: a tensor's ``.grad`` buffer accumulates additively across
backward passes; callers reset between optimizer steps (``zero_grad``). A
tape records one forward pass and may be backwarded once. Ops executed with
no active tape run as plain NumPy — that is how evaluation and the
adversarial-construction passes stay off the gradient path.

Broadcasting is limited to a smaller operand whose shape is a suffix of the
larger one (i.e. broadcast over leading batch dimensions); anything else
needs an explicit reshape, so shape bugs fail loudly.
"""

from __future__ import annotations

import threading

import numpy as np

from . import _kernels as K
from .errors import ContractError, DegenerateInputError, ShapeError, VocabularyError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional real array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; full op set lives at module level.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    """One executed op: output, inputs, and the local backward rule."""

    __slots__ = ("out", "inputs", "bwd", "op")

    def __init__(self, op, out, inputs, bwd):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    top = stack[-1] if stack else None
    return top if isinstance(top, GradTape) else None


class GradTape:
    """Ordered record of the differentiable ops of one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _tape_stack().pop()
        assert top is self, "tape stack corrupted"
        return False

    def _record(self, node: _Node):
        if self._consumed:
            raise ContractError("recording on a tape that was already backwarded")
        self._nodes.append(node)

    def backward(self, loss: Tensor):
        """Accumulate gradients of ``loss`` into every tensor on this tape.

        Returns a dict mapping each requires_grad leaf encountered to its
        (accumulated) gradient array. May be called once per tape.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("tape already backwarded; record a new forward pass")
        self._consumed = True

        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            gy = node.out.grad
            if gy is None:
                continue
            grads = node.bwd(gy)
            for inp, g in zip(node.inputs, grads):
                if g is None:
                    continue
                inp.accumulate_grad(g)
                if inp.requires_grad and inp.node is None:
                    leaves[id(inp)] = inp
        self._nodes.clear()
        return {t: t.grad for t in leaves.values()}


class untracked:
    """Context that suspends recording (ops inside run as plain NumPy)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _make(op, data, inputs, bwd) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None:
        node = _Node(op, out, inputs, bwd)
        out.node = node
        tape._record(node)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(op, *ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} vs {t.dtype}")


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def _suffix_axes(big, small):
    """Axes of `big` to sum over so the result has shape `small`."""
    if small == big:
        return None
    if len(small) > len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shape {small} is not a suffix of {big}")
    return tuple(range(len(big) - len(small)))


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes("add", a, b)
    axes = _suffix_axes(a.shape, b.shape)

    def bwd(gy):
        gb = gy if axes is None else gy.sum(axis=axes)
        return gy, gb.reshape(b.shape)

    return _make("add", a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    axes = _suffix_axes(a.shape, b.shape)

    def bwd(gy):
        ga = gy * b.data
        gb = gy * a.data
        if axes is not None:
            gb = gb.sum(axis=axes)
        return ga, gb.reshape(b.shape)

    return _make("mul", a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scale", a.data * np.asarray(s, dtype=a.dtype), (a,), lambda gy: (gy * s,))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return _make("relu", y, (a,), lambda gy: (gy * (a.data > 0),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    y = np.reshape(a.data, shape)
    return _make("reshape", y, (a,), lambda gy: (gy.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda gy: (np.transpose(gy, inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    _check_dtypes("concat", *tensors)
    ax = axis if axis >= 0 else tensors[0].data.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(gy):
        return tuple(np.ascontiguousarray(p) for p in np.split(gy, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bwd)


def tsum(a: Tensor) -> Tensor:
    y = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _make("sum", y, (a,), lambda gy: (np.broadcast_to(gy, a.shape).astype(a.dtype, copy=True),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    y = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _make("mean", y, (a,), lambda gy: (np.broadcast_to(gy / n, a.shape).astype(a.dtype, copy=True),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dimensions."""
    _check_dtypes("matmul", a, b)
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2] or sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} x {sb}")

    def bwd(gy):
        ga = np.matmul(gy, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), gy)
        return ga, gb

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# Normalization & activation distributions (kernel-backed)
# ---------------------------------------------------------------------------


def _to_2d(arr, axis):
    """Move `axis` last and flatten to (N, C) contiguous."""
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])), moved.shape


def _from_2d(arr2d, moved_shape, axis):
    return np.moveaxis(arr2d.reshape(moved_shape), -1, axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x2, mshape = _to_2d(a.data, axis)
    y2 = K.softmax_fwd(x2)
    y = _from_2d(y2, mshape, axis)

    def bwd(gy):
        gy2, _ = _to_2d(gy, axis)
        gx2 = K.softmax_bwd(y2, gy2)
        return (_from_2d(gx2, mshape, axis),)

    return _make("softmax", np.ascontiguousarray(y), (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(gy):
        return (gy - np.exp(y) * gy.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain/bias."""
    _check_dtypes("layer_norm", a, gain, bias)
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last dim of {a.shape}"
        )
    x2, mshape = _to_2d(a.data, -1)
    y2, mean, rstd = K.layer_norm_fwd(x2, gain.data, bias.data, eps)

    def bwd(gy):
        gy2, _ = _to_2d(gy, -1)
        gx2, dgain, dbias = K.layer_norm_bwd(gy2, x2, gain.data, mean, rstd)
        return _from_2d(gx2, mshape, -1), dgain, dbias

    return _make("layer_norm", y2.reshape(mshape), (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# Embedding lookup and losses
# ---------------------------------------------------------------------------


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table; output shape = ids.shape + (row_dim,).

    Backward scatter-adds into the table's gradient, so repeated ids
    accumulate.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    nrows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= nrows):
        raise VocabularyError(
            f"gather_rows: id out of range [0, {nrows}) (min {ids.min()}, max {ids.max()})"
        )
    flat = np.ascontiguousarray(ids.reshape(-1))
    y = table.data[flat].reshape(ids.shape + (table.shape[1],))

    def bwd(gy):
        gt = np.zeros_like(table.data)
        K.scatter_add_rows(gt, flat, np.ascontiguousarray(gy.reshape(flat.size, -1)))
        return (gt,)

    return _make("gather_rows", y, (table,), bwd)


def nll_loss(logits: Tensor, ids, weights) -> Tensor:
    """Scalar sum_p weights[p] * (-log softmax(logits)[p, ids[p]]).

    ids/weights are shaped like logits minus the class axis. This is the
    fused building block behind cross_entropy and the per-sentence-mean
    translation loss.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != logits.shape[:-1]:
        raise ShapeError(f"nll_loss: ids shape {ids.shape} vs logits {logits.shape}")
    vocab = logits.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(f"nll_loss: target id out of range [0, {vocab})")
    w = np.ascontiguousarray(np.asarray(weights, dtype=logits.dtype).reshape(-1))
    flat_ids = np.ascontiguousarray(ids.reshape(-1))
    x2 = np.ascontiguousarray(logits.data.reshape(-1, vocab))
    loss, probs = K.nll_fwd(x2, flat_ids, w)

    def bwd(gy):
        g2 = K.nll_bwd(probs, flat_ids, w, float(gy))
        return (g2.reshape(logits.shape),)

    return _make("nll", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def cross_entropy(logits: Tensor, target_ids, pad_id: int) -> Tensor:
    """Mean token NLL over non-pad targets (softmax over the last axis)."""
    ids = np.asarray(target_ids, dtype=np.int64)
    mask = ids != pad_id
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("cross_entropy: no non-pad target positions")
    weights = mask.astype(logits.dtype) / n
    return nll_loss(logits, ids, weights)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))
