#!/usr/bin/env python3
"""
Tensor Engine
Dense float tensors over numpy with a reverse-mode gradient tape.

Forward ops record onto the innermost active GradTape (per thread) whenever
one of their inputs requires grad. Without an active tape they only compute.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Number = Union[int, float]
GradientMap = Dict["Tensor", np.ndarray]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


class TensorError(ValueError):
    """Base class for tensor-engine failures."""


class ShapeMismatch(TensorError):
    pass


class IndexOutOfRange(TensorError):
    pass


class EmptyInput(TensorError):
    pass


class NotScalar(TensorError):
    pass


class NoTape(TensorError):
    pass


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Run the enclosed computation with tensors created as ``dtype``."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


@contextmanager
def kink_log() -> Iterator[List[bytes]]:
    """Collect branch signatures of non-smooth ops run inside the block."""
    previous = getattr(_local, "kinks", None)
    log: List[bytes] = []
    _local.kinks = log
    try:
        yield log
    finally:
        _local.kinks = previous


def _note_branches(mask: np.ndarray) -> None:
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.append(np.packbits(mask.ravel()).tobytes())


def _tape_stack() -> List["GradTape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float array; ``requires_grad`` leaves are trainable parameters."""

    __slots__ = ("data", "requires_grad", "tape_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name
        self._tape: Optional[GradTape] = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.data.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeRecord:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """Ordered record of differentiable ops, confined to the thread that opened it."""

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        output.requires_grad = True
        output.tape_id = len(self.records)
        output._tape = self
        self.records.append(TapeRecord(output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> GradientMap:
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: Dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records[: loss.tape_id + 1]):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            for tensor, contribution in zip(record.inputs, record.backward(upstream)):
                if contribution is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
                    owners[key] = tensor
        return {owners[key]: grad for key, grad in grads.items()}


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar loss for every requires_grad tensor it depends on."""
    if loss.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise NoTape("loss was not recorded on a gradient tape")
    return loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=default_dtype()))


def _as_tensor(value: Union[Tensor, Number], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * like.ndim, value, dtype=default_dtype()))


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    # Equal rank only; size-1 axes stretch.
    if len(a) != len(b):
        raise ShapeMismatch(f"cannot broadcast shapes {a} and {b} of different rank")
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"cannot broadcast shapes {a} and {b}")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs [m×k]·[k×n], got {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise EmptyInput("concat needs at least one tensor")
    rank = tensors[0].ndim
    axis = axis % rank if rank else 0
    for t in tensors:
        if t.ndim != rank or any(d != e for i, (d, e) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeMismatch(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    if len(tensors) == 1:
        return tensors[0]
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: np.split(g, offsets, axis=axis))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data > 0
    _note_branches(positive)
    return _make(np.where(positive, x.data, slope * x.data), (x,),
                 lambda g: (np.where(positive, g, slope * g),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    _note_branches(positive)
    return _make(np.where(positive, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (np.where(positive, g, 0.0).astype(g.dtype),))


def elu(x: Tensor) -> Tensor:
    positive = x.data > 0
    _note_branches(positive)
    negative_part = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(positive, x.data, negative_part)
    return _make(out, (x,), lambda g: (np.where(positive, g, g * (negative_part + 1.0)),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"maximum needs equal shapes, got {a.shape} and {b.shape}")
    pick_a = a.data >= b.data
    _note_branches(pick_a)
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (np.where(pick_a, g, 0.0).astype(g.dtype), np.where(pick_a, 0.0, g).astype(g.dtype)))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, x.shape)),)

    return _make(out, (x,), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _check_indices(indices, upper: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= upper):
        raise IndexOutOfRange(f"{what}: indices must lie in [0, {upper}), got range [{idx.min()}, {idx.max()}]")
    return idx


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into it."""
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup needs a [V×d] table, got {table.shape}")
    idx = _check_indices(indices, table.shape[0], "embedding_lookup")

    def grad_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(table.data[idx], (table,), grad_fn)


def segment_sum(values: Tensor, segment_of, n_segments: int) -> Tensor:
    """Per-segment row sums, accumulated sequentially in row order; empty segments stay zero."""
    seg = np.asarray(segment_of, dtype=np.int64).reshape(-1)
    if values.ndim < 1 or seg.size != values.shape[0]:
        raise ShapeMismatch(f"segment_sum: {seg.size} segment ids for {values.shape[0] if values.ndim else 0} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ShapeMismatch(f"segment_sum: segment ids must lie in [0, {n_segments})")
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out, seg, values.data)
    return _make(out, (values,), lambda g: (g[seg],))


def segment_softmax(scores: Tensor, segment_of) -> Tensor:
    """Softmax of a [E] score vector within each segment (max-subtracted)."""
    seg = np.asarray(segment_of, dtype=np.int64).reshape(-1)
    if scores.size == 0:
        raise EmptyInput("segment_softmax over zero scores")
    if scores.ndim != 1 or seg.size != scores.shape[0]:
        raise ShapeMismatch(f"segment_softmax: {seg.size} segment ids for scores of shape {scores.shape}")
    n_segments = int(seg.max()) + 1
    peak = np.full(n_segments, -np.inf, dtype=scores.data.dtype)
    np.maximum.at(peak, seg, scores.data)
    exp = np.exp(scores.data - peak[seg])
    totals = np.zeros(n_segments, dtype=scores.data.dtype)
    np.add.at(totals, seg, exp)
    out = exp / totals[seg]

    def grad_fn(g):
        dot = np.zeros(n_segments, dtype=g.dtype)
        np.add.at(dot, seg, g * out)
        return (out * (g - dot[seg]),)

    return _make(out, (scores,), grad_fn)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax(logits)."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeMismatch(f"softmax_cross_entropy needs [B×K] logits, got {logits.shape}")
    batch, classes = logits.shape
    target = _check_indices(targets, classes, "softmax_cross_entropy")
    if target.size != batch:
        raise ShapeMismatch(f"{target.size} targets for a batch of {batch}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = (log_norm - shifted[rows, target]).mean()

    def grad_fn(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, target] -= 1.0
        return (probs * (g / batch),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)


class FiniteCheck(NamedTuple):
    ok: bool
    index: Optional[int] = None
    value: Optional[float] = None

    def __bool__(self) -> bool:
        return self.ok


def check_finite(t: Union[Tensor, np.ndarray]) -> FiniteCheck:
    """``ok`` or the first offending flat index with its NaN/Inf value."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    flat = data.reshape(-1)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size == 0:
        return FiniteCheck(True)
    return FiniteCheck(False, int(bad[0]), float(flat[bad[0]]))
