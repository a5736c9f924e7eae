"""Tensor type and the tape that records differentiable operations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import StateError

_ACTIVE: List["Graph"] = []


class Tensor:
    """N-dimensional array with an optional gradient slot.

    Data is float32 unless ``dtype`` asks otherwise; float64 tensors are the
    shadow path used by finite-difference checks and every op preserves the
    dtype of its inputs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Graph:
    """Tape of recorded operations, kept in execution order.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended to the tape.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._produced: set = set()
        self._consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], fn: BackwardFn) -> None:
        if self._consumed:
            raise StateError("graph already consumed by backward; record a new one")
        output.requires_grad = True
        self.nodes.append(Node(output, inputs, fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("backward called twice on the same graph")
        if id(loss) not in self._produced:
            raise StateError("loss was not produced by a forward pass recorded on this graph")
        if loss.size != 1:
            raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")

        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                else:
                    t.grad = t.grad + gi
        self._consumed = True
        self.nodes = []


def active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(output: Tensor, inputs: Tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    """Attach ``fn`` to the active graph when any input needs a gradient."""
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(output, inputs, fn)
    return output


def backward(loss: Tensor, graph: Graph) -> None:
    graph.backward(loss)
