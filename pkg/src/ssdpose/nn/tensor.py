"""Dense tensors and a reverse-mode tape.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, which is a topological order of the graph by construction.
:func:`backward` walks the tape once in reverse.

A tape can be backpropagated exactly once; a second call raises. Gradients
of leaf tensors accumulate into ``Tensor.grad`` across tapes until
:meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; see ops.py for the implementations
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(ops.as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / other)


@dataclass
class Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    # discrete choices made in the forward pass (relu mask, pool argmax)
    pattern: Optional[np.ndarray] = None


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self):
        return len(self.nodes)

    def patterns(self, op: Optional[str] = None) -> list:
        return [n.pattern for n in self.nodes if n.pattern is not None and (op is None or n.op == op)]

    def backward(self, root: Tensor) -> dict:
        return backward(root, self)


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, data: np.ndarray, inputs: tuple, backward_fn, pattern=None) -> Tensor:
    """Wrap ``data`` in a Tensor and put it on the active tape if needed."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.nodes.append(Node(op, out, inputs, backward_fn, pattern))
    return out


def backward(root: Tensor, tape: Optional[Tape] = None) -> dict:
    """Backpropagate from scalar ``root``; returns ``{leaf: gradient}``.

    Leaf gradients are also accumulated into ``leaf.grad``.
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise RuntimeError("backward() needs a tape; run the forward pass inside `with Tape():`")
    if root.size != 1:
        raise ValueError(f"backward() requires a scalar root, got shape {root.shape}")
    if tape.consumed:
        raise RuntimeError("this tape was already backpropagated; record a new one")
    tape.consumed = True

    grads = {id(root): np.ones_like(root.data)}
    leaves: dict = {}
    if root.is_leaf and root.requires_grad:
        leaves[root] = grads[id(root)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                leaves[t] = leaves[t] + gi if t in leaves else gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    for t, g in leaves.items():
        g = g.reshape(t.shape).astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
    return leaves
