"""Dense tensors with a reverse-mode tape."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import memory

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense real array that can take part in reverse-mode differentiation.

    ``parents`` and ``backward_fn`` are populated only for nodes created by an
    op while gradient tracking is on and at least one input requires grad.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

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
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops
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
        return ops.neg(self)

    def __truediv__(self, other):
        from . import ops
        return ops.mul(self, 1.0 / other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        from . import ops
        return ops.sum(self, axis)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, attaching it to the graph when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    # views of a parent's buffer allocate nothing
    root = memory._root(data) if isinstance(data, np.ndarray) else None
    if root is not None and not any(memory._root(p.data) is root for p in parents):
        memory.register(data)
    return out


def save(arr: np.ndarray) -> np.ndarray:
    """Mark an array as held for the backward pass (counted by the tracker)."""
    memory.register(arr)
    return arr


class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Every node appears after all of its parents.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None, retain_graph: bool = False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Interior nodes are released as soon as their gradient has been propagated
    unless ``retain_graph`` is set. When ``params`` is given, their gradients
    are returned in order, with zeros for tensors not on any path to ``loss``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("backward from a non-finite loss")
    if loss.requires_grad:
        tape = Tape.from_root(loss)
        nodes = tape.nodes
        del tape
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        while nodes:
            node = nodes.pop()
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                _accumulate_leaf(node, g)
                continue
            parent_grads = node.backward_fn(g)
            del g
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise DimensionError(f"{node.op}: grad shape {pg.shape} != {p.data.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                # gradients bound for leaves are parameter traffic, not transients
                if p.backward_fn is not None:
                    memory.register(grads[key])
            del parent_grads
            p = pg = None
            if not retain_graph:
                node.parents = ()
                node.backward_fn = None
                node.requires_grad = False
            del node
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _accumulate_leaf(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
    else:
        node.grad += g
