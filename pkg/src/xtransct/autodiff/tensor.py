"""Shaped arrays that record how they were computed, and the reverse pass over them."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError

# Gradient recording is switched off per thread so read-only inference can run
# concurrently with (or inside) a training process.
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode differentiation.

    ``values`` holds the data with its shape; ``grad`` is filled by
    :func:`backward` for leaf tensors that have ``requires_grad`` set.
    Tensors produced by operations keep references to their parents and a
    closure mapping the output gradient to one gradient per parent.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def make_result(values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's forward output, recording the graph edge when needed."""
    out = Tensor(values)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


class GradientTape:
    """Operations reachable from an output, in topological order.

    ``nodes[i]`` never depends on ``nodes[j]`` for ``j > i``, which lets the
    reverse pass walk the list backwards and touch every node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "GradientTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep transformer graphs overflow recursion
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientTape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    ``loss`` must hold a single element. Tensors listed in ``params`` that the
    loss does not depend on get a zero gradient instead of ``None``.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    if not loss.requires_grad:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.values)
        return GradientTape([])

    tape = GradientTape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.values)
    return tape
