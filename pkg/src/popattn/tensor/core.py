"""Tensor type and the reverse-mode tape.

Every primitive op that produces a tensor requiring gradients stamps the
output with a monotonically increasing sequence number and a closure that
pushes the output's gradient into its inputs. ``Tape.from_root`` recovers
the executed ops reachable from a loss, ordered by that sequence number, so
``backward`` replays adjoints in exact reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import InvalidInputError

DEFAULT_DTYPE = np.float32

_op_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float array with an optional gradient buffer.

    ``data`` is a numpy array; float32 unless built from float64 data, which
    is how the gradient-check oracles re-execute a graph in double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(arr, dtype=dtype, copy=True) if arr.dtype != dtype else arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the functions live in .ops to keep this module small.
    def __add__(self, other):
        from .ops import add
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        from .ops import add
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        from .ops import sub
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        from .ops import mul
        return mul(_wrap(other, self), self)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that the optimizer updates."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(np.array(data, copy=True), requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Attach ``backward_fn`` to ``out`` if any parent needs gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_op_counter)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``; no-op for tensors that need no gradient."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


@dataclass(frozen=True)
class TapeEntry:
    seq: int
    output: Tensor


class Tape:
    """Executed ops reachable from one root, in execution order."""

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._parents)
        found.sort(key=lambda t: t._seq)
        return cls([TapeEntry(t._seq, t) for t in found])

    def reversed_outputs(self) -> Iterator[Tensor]:
        for entry in reversed(self.entries):
            yield entry.output


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf with dLoss/dLeaf.

    Leaf gradients accumulate across calls; intermediate gradients are
    reset each call so a second ``backward`` exactly doubles leaf grads.
    """
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidInputError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_root(loss)
    for entry in tape:
        entry.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for out in tape.reversed_outputs():
        if out.grad is not None:
            out._backward(out.grad)
