"""NDArray value type and the reverse-mode tape."""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()
_seq = itertools.count()
_default_dtype = np.dtype(np.float32)
_debug = False


class DimensionError(ValueError):
    """Operand shapes are incompatible for an operation."""


class UsageError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_TYPES:
        raise ValueError(f"unsupported element type {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_debug(flag: bool) -> None:
    """Make every forward op raise FloatingPointError on non-finite output."""
    global _debug
    _debug = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.grad_enabled = False

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev


class record_pieces:
    """Inside the block, every piecewise-linear op appends one integer array
    naming the linear piece of each input element (``with record_pieces() as
    log: ...``). Two evaluations with equal logs lie on the same smooth piece."""

    def __enter__(self) -> list:
        self._prev = getattr(_local, "pieces", None)
        _local.pieces = []
        return _local.pieces

    def __exit__(self, *exc):
        _local.pieces = self._prev


def note_pieces(code: np.ndarray) -> None:
    log = getattr(_local, "pieces", None)
    if log is not None:
        log.append(np.asarray(code, dtype=np.int8))


class Node:
    """One recorded operation: its parents and a closure mapping the output
    gradient to one gradient per parent (None where not needed)."""

    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward = backward


class NDArray:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, NDArray):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_TYPES else _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "NDArray":
        return NDArray(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"NDArray(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in ops ------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.mul(ops.reciprocal(self), other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element array, got shape {shape}")


def as_array(x, dtype=None) -> NDArray:
    if isinstance(x, NDArray):
        return x
    return NDArray(np.asarray(x), dtype=dtype)


def make_output(data: np.ndarray, parents: Sequence[NDArray], backward: Callable, op: str) -> NDArray:
    """Wrap a kernel result, recording it on the tape when any parent needs grad."""
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")
    out = NDArray(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward)
    return out


class Tape:
    """Operations reachable from an output, in recording order."""

    def __init__(self, records: list[Node]):
        self.records = records

    @classmethod
    def from_output(cls, out: NDArray) -> "Tape":
        seen: set[int] = set()
        records: list[Node] = []
        stack = [out]
        while stack:
            arr = stack.pop()
            node = arr._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            records.append(node)
            stack.extend(node.parents)
        records.sort(key=lambda n: n.seq)
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [n.op for n in self.records]

    def backward(self, out: NDArray, grad: np.ndarray | None = None, visit: Callable | None = None) -> None:
        if out._node is None:
            if out.requires_grad:
                _accumulate_leaf(out, np.ones_like(out.data) if grad is None else grad)
                return
            raise UsageError("backward on an array that is not connected to any trainable input")
        grads: dict[int, np.ndarray] = {id(out._node): np.ones_like(out.data) if grad is None else grad}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"'{node.op}' produced grad of shape {pg.shape} for input {parent.shape}")
                if parent._node is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent._node)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _accumulate_leaf(leaf: NDArray, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def backward(loss: NDArray) -> None:
    """Populate ``grad`` on every trainable leaf reachable from a scalar loss."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_output(loss).backward(loss)
