"""Dense tensors with tape-based reverse-mode differentiation."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, TapeError

_DEFAULT_DTYPE = np.float32
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Operations are appended in execution order, which is already a
    topological order of the graph, so the backward pass simply walks the
    entries in reverse. A tape can be consumed by exactly one backward pass.
    """

    entries: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, op, inputs, output, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.entries)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array that optionally tracks gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None  # set when produced by a recorded op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

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

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None and np.isscalar(value):
        dtype = _DEFAULT_DTYPE
    return Tensor(value, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if any input needs grad."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``params`` that the loss does not depend on receive zeros.
    Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already replayed; run the forward pass again before calling backward")
    tape.consumed = True

    pending = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        gout = pending.pop(id(entry.output), None)
        if gout is None:
            continue
        grads = entry.backward(gout)
        for tensor, g in zip(entry.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != tensor.shape:
                raise ShapeError(
                    f"{entry.op}: gradient shape {g.shape} does not match input shape {tensor.shape}"
                )
            if tensor._tape is tape:
                key = id(tensor)
                pending[key] = pending[key] + g if key in pending else g
            elif tensor.grad is None:
                tensor.grad = np.array(g, dtype=tensor.dtype, copy=True)
            else:
                tensor.grad += g
    tape.entries.clear()

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
