"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference code can use the same functions at
near-numpy cost::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = tape.backward(loss)      # {x.id: 2 * x.data}
"""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()
_local = threading.local()


class Tensor:
    """A dense array plus the bookkeeping needed to take part in a tape."""

    __slots__ = ("data", "requires_grad", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=getattr(_local, "dtype", np.float64))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=getattr(_local, "dtype", np.float64)), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Entry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications (the computation record).

    Entries are appended in execution order, so inputs always precede the
    entries that consume them and a reverse sweep is a valid topological
    traversal.
    """

    entries: list[Entry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind, inputs, output, backward) -> None:
        self.entries.append(Entry(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every grad-requiring leaf.

        The returned map is keyed by tensor id. Intermediate gradients are
        discarded as soon as they have been propagated; the tape itself is
        left untouched and can be swept again.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return {}
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output.id, None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
        return grads


class no_record:
    """Suspend recording inside the block (nested tapes are restored after)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack().extend(self._saved)


class precision:
    """Create new tensors with ``dtype`` inside the block.

    Only meant for oracles: ``np.longdouble`` lets finite differences be
    evaluated well below float64 round-off.
    """

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._saved = getattr(_local, "dtype", np.float64)
        _local.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _local.dtype = self._saved


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan when it is not
    if not math.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericError(f"{kind} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, result, backward)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(kind: str, op, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"{kind}: operands {_label(a)} {a.shape} and {_label(b)} {b.shape} do not broadcast"
        ) from None


def _label(t: Tensor) -> str:
    return t.name or f"#{t.id}"


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), _binary("add", np.add, a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), _binary("sub", np.subtract, a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), _binary("mul", np.multiply, a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n) or (k,)."""
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul: {_label(a)} {a.shape} @ {_label(b)} {b.shape} inner dims disagree"
        )
    ad, bd = a.data, b.data

    def back(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1)
        else:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(
                f"concat(axis={axis}): {_label(t)} {t.shape} incompatible with {ref}"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax),
                 lambda g: np.split(g, splits, axis=ax))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed operand shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)
    return _emit("stack", tensors, out,
                 lambda g: [np.take(g, i, axis=ax) for i in range(n)])


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {_label(a)} {src} as {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    y = -np.logaddexp(0.0, -a.data)
    s = expit(-a.data)
    return _emit("log_sigmoid", (a,), y, lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    return _emit("log", (a,), y, lambda g: (g / ad,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), y, back)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array ``ids`` of any shape."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].reshape(-1)[0]
        raise IndexError(f"embedding: token id {bad} outside table of {vocab} rows")
    tshape = table.shape

    def back(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _emit("embedding", (table,), table.data[idx], back)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    src = a.shape
    out = a.data[key]

    def back(g):
        ga = np.zeros(src)
        ga[key] = g
        return (ga,)

    return _emit("slice", (a,), np.array(out, dtype=a.data.dtype), back)


def pick(a: Tensor, ids) -> Tensor:
    """``a[b, ids[b]]`` for a (B, V) tensor: the per-row entry at ``ids``."""
    idx = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: need (B, V) and (B,), got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    src = a.shape

    def back(g):
        ga = np.zeros(src)
        ga[rows, idx] = g
        return (ga,)

    return _emit("pick", (a,), a.data[rows, idx], back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


PRIMITIVES = {
    "matmul": matmul, "add": add, "mul": mul, "concat": concat, "tanh": tanh,
    "sigmoid": sigmoid, "softmax": softmax, "log": log, "embedding": embedding,
    "slice": slice_, "sum": sum_,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)
