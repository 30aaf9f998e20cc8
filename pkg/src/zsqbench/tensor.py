"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the thread's current
:class:`Tape`.  :func:`backward` walks the tape in strict reverse append
order, deposits gradients on leaf tensors and clears the tape.  :func:`grad`
performs the same walk without touching leaves or clearing, which is what
Grad-CAM needs to read gradients at an intermediate activation while the
rest of the graph stays alive for the training loss.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, StateError

DEFAULT_DTYPE = np.float32
_generations = itertools.count()


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations.

    Handles are ``(generation, index)`` pairs; clearing bumps the generation
    so stale handles are detected instead of silently reused.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = next(_generations)

    def append(self, node: Node) -> tuple[int, int]:
        self.nodes.append(node)
        return (self.generation, len(self.nodes) - 1)

    def clear(self) -> None:
        self.nodes = []
        self.generation = next(_generations)

    def owns(self, handle: tuple[int, int] | None) -> bool:
        return handle is not None and handle[0] == self.generation and handle[1] < len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def scoped_tape() -> Iterator[Tape]:
    """Record onto a private tape, restoring the caller's tape afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_handle", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != DEFAULT_DTYPE:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._handle: tuple[int, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._handle = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
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
        return self._handle is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in ops -------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __pow__(self, exponent):
        from . import ops
        if exponent != 2:
            raise ContractError("only squaring is supported")
        return ops.square(self)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` and record a node when any input needs a gradient."""
    out = Tensor._wrap(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._handle = _state.tape.append(Node(kind, tuple(inputs), backward))
    return out


def _propagate(tape: Tape, start: int, seed: np.ndarray, stop: int, leaf_sink, capture) -> None:
    pending: dict[int, np.ndarray] = {start: seed}
    for idx in range(start, stop - 1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        if capture is not None and idx in capture:
            capture[idx] = g
        node = tape.nodes[idx]
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            h = t._handle
            if tape.owns(h):
                if h[1] in pending:
                    pending[h[1]] = pending[h[1]] + gi
                else:
                    pending[h[1]] = gi
            else:
                leaf_sink(t, gi)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on, then clear the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape.owns(loss._handle):
        raise StateError("loss has no live tape node; backward was already run or nothing was recorded")

    def sink(t: Tensor, g: np.ndarray) -> None:
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g

    seed = np.ones_like(loss.data)
    try:
        _propagate(tape, loss._handle[1], seed, 0, sink, None)
    finally:
        tape.clear()


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(output)/d(input) for each input without consuming the tape.

    Inputs may be leaves or intermediate tensors.  Gradients of inputs that
    ``output`` does not depend on come back as zeros.
    """
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    tape = _state.tape
    if not tape.owns(output._handle):
        raise StateError("output has no live tape node")
    capture: dict[int, np.ndarray | None] = {}
    leaves: dict[int, np.ndarray] = {}
    stop = output._handle[1]
    any_leaf = False
    for t in inputs:
        if tape.owns(t._handle):
            capture[t._handle[1]] = None
            stop = min(stop, t._handle[1])
        else:
            any_leaf = True
    if any_leaf:
        stop = 0
    leaf_ids = {id(t) for t in inputs if not tape.owns(t._handle)}

    def sink(t: Tensor, g: np.ndarray) -> None:
        if id(t) in leaf_ids:
            leaves[id(t)] = leaves[id(t)] + g if id(t) in leaves else g

    _propagate(tape, output._handle[1], np.ones_like(output.data), stop, sink, capture)
    out = []
    for t in inputs:
        if tape.owns(t._handle):
            g = capture.get(t._handle[1])
        else:
            g = leaves.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False))
    return out


def reset_tape() -> None:
    """Drop every recorded node on this thread's tape."""
    _state.tape.clear()
