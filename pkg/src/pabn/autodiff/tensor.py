"""Tensor container and tape-free reverse-mode differentiation.

Every differentiable primitive returns a :class:`Tensor` whose ``node`` points
back at the inputs it was computed from. :func:`backward` walks those links
from a scalar loss, orders it topologically into a :class:`Graph` and pushes
gradients through each node exactly once.
"""

from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# op name -> multiplier applied to that op's backward output (fault-injection hook)
_BACKWARD_SCALE: dict[str, float] = {}


class Tensor:
    """Dense float array with an optional gradient slot.

    Data is float32 unless a float64 array is passed explicitly (used by the
    gradient checker). ``grad`` always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def _raise_not_scalar(shape):
    raise ValueError(f"expected a single-element tensor, got shape {shape}")


@dataclass(eq=False)
class Node:
    """One executed primitive: its inputs, its output and how to pull gradients back."""

    op: str
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # weak, so a finished graph is freed by refcounting instead of waiting for the cycle collector
    _output: weakref.ref | None = field(default=None, repr=False)

    @property
    def output(self) -> Tensor | None:
        return None if self._output is None else self._output()

    def vjp(self, grad_out: np.ndarray) -> Sequence[np.ndarray | None]:
        grads = self.backward_fn(grad_out)
        scale = _BACKWARD_SCALE.get(self.op)
        if scale is not None:
            grads = [None if g is None else g * scale for g in grads]
        return grads


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and record its inputs when any input needs a gradient."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype if data.dtype in FLOAT_DTYPES else None)
    if needs_grad:
        node = Node(op, tuple(inputs), backward_fn)
        node._output = weakref.ref(out)
        out.node = node
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Topologically ordered record of the primitives that produced ``root``."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(order)
        # iterative post-order DFS; recursion depth would blow up on long chains
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in reversed(node.inputs):
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` of every gradient-requiring tensor reachable from ``loss``.

    Gradients arriving from several consumers are summed, and gradients already
    present on leaf tensors are accumulated into rather than overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        out = node.output
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(f"{node.op}: gradient shape {gi.shape} does not match input {t.shape}")
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi

    # whatever is left belongs to leaves
    leaves = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.node is None and t.requires_grad:
                leaves[id(t)] = t
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = pending.get(key)
        if g is None:
            continue
        t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
    return graph


@contextlib.contextmanager
def inject_backward_fault(op: str, scale: float = 2.0):
    """Test hook: multiply the backward output of one primitive by ``scale``."""
    previous = _BACKWARD_SCALE.get(op)
    _BACKWARD_SCALE[op] = scale
    try:
        yield
    finally:
        if previous is None:
            _BACKWARD_SCALE.pop(op, None)
        else:
            _BACKWARD_SCALE[op] = previous
