"""Dense tensor container and the reverse-mode tape.

Operations in :mod:`fastscnn.functional` record themselves on the tape that is
active on the current thread.  A tape is opened explicitly for one forward
pass and consumed by :func:`backward`::

    with Tape() as tape:
        loss = F.sum(F.relu(x))
    backward(loss)          # or tape.backward(loss)

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    """An ndarray plus gradient bookkeeping.

    Activations are rank-4 ``(n, c, h, w)``; parameters may be rank-1 (batch
    norm affine) and losses are rank-0.  Storage is float32 unless the caller
    passes float64 data, which the gradient checks do.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __mul__(self, other):
        from . import functional as F
        return F.scale(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records primitive ops executed on this thread while active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(output, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in produced and loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)
        self.nodes.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(output: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient.

    ``vjp`` maps the output gradient to a tuple of input gradients (``None``
    for inputs that do not need one).
    """
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(output, inputs, vjp)
    return output


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every leaf tensor that contributed to ``loss``.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between steps.
    """
    tape = tape or current_tape()
    if tape is None:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise RuntimeError("no tape is recording; run the forward pass inside `with Tape():`")
    tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
