"""Dense tensors and the tape that records them for reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`convcut.ops` record
a node on the innermost active :class:`GradTape` whenever at least one input
requires a gradient; :func:`backward` walks that tape in reverse.

Nothing is recorded outside a tape, so plain inference does not build a graph.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "convcut_dtype", default=np.dtype(np.float32)
)
_TAPES: contextvars.ContextVar[tuple["GradTape", ...]] = contextvars.ContextVar(
    "convcut_tapes", default=()
)

MAX_RANK = 4


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are cast to.

    Only the finite-difference harness uses this (with float64); the model and
    training code always run in float32.
    """
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """An N-d float array (rank <= 4) that may take part in gradient tracing."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=default_dtype())
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise DimensionError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor owned by a layer."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class GradTape:
    """Append-only record of the operations executed while it is active.

    Use as a context manager::

        with GradTape() as tape:
            loss = ...
        grads = backward(loss, tape)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._ids: set[int] = set()
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _TAPES.set(_TAPES.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, rule: BackwardRule) -> None:
        self.nodes.append(Node(op, inputs, output, rule))
        self._ids.add(id(output))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> GradTape | None:
    tapes = _TAPES.get()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an enclosing tape."""
    token = _TAPES.set(())
    try:
        yield
    finally:
        _TAPES.reset(token)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap an op result in a Tensor, registering ``rule`` on the active tape.

    ``rule`` maps the gradient of the output to one gradient per input (None
    for inputs that need none).
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, tuple(inputs), out, rule)
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Returns a map from every ``requires_grad`` tensor reachable from the loss
    (leaves and intermediates) to its gradient; each tensor's ``.grad`` is set
    too. A loss that was not produced under the tape yields an empty map.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or (loss not in tape and not isinstance(loss, Parameter)):
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ContractError(
                    f"backward rule of {node.op} produced gradient {g.shape} for input {t.shape}"
                )
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = owners[key]
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g
        result[t] = g
    return result
