"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage dtype of newly created leaf tensors.

    Verification runs use ``precision(np.float64)``; training stays in float32.
    The setting is thread-local so independent tapes on other threads are unaffected.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Dense float array with an optional gradient slot.

    Tensors are treated as immutable once produced. ``grad`` is only populated
    on leaves with ``requires_grad=True`` after a backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable] = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if op == "leaf":
            arr = arr.astype(default_dtype(), copy=False)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, seed: Optional[np.ndarray] = None) -> "Tape":
        tape = Tape.from_output(self)
        tape.backward(seed)
        return tape

    # operator sugar; implementations live in ops.py
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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __abs__(self):
        from . import ops
        return ops.abs(self)


def make_node(
    data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str
) -> Tensor:
    """Wrap an op result; the graph edge is recorded only if a parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, False, op=op)


class Tape:
    """Topologically ordered record of the nodes that lead to one output.

    ``nodes[i]``'s parents always appear before index ``i``; the reverse sweep
    visits each node exactly once.
    """

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order, out)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        out = self.output
        if not out.requires_grad:
            return
        if seed is None:
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
