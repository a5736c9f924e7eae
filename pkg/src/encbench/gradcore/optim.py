"""Named parameter sets and the SGD update."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from ..errors import InputError, StateError
from .tensor import Tensor


class ParamSet:
    """Ordered name -> Tensor mapping plus optimizer state."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.velocity: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise InputError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def values(self):
        return self._params.values()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.9,
             weight_decay: float = 5e-4) -> ParamSet:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v.
    Gradients are cleared afterwards.
    """
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters: {', '.join(missing[:5])}")
    for name, p in params.items():
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = params.velocity.get(name)
        v = d.astype(p.dtype) if v is None else momentum * v + d
        params.velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype)
        p.grad = None
    params.step += 1
    return params
