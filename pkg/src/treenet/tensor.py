"""Tensor type and the define-by-run reverse-mode graph."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
# op kind -> factor applied to that op's input grads; fault-injection hook for gradcheck
_grad_corruption: dict = {}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class OpNode:
    """One recorded op: its inputs and the closure that maps output grad to input grads."""

    kind: str
    parents: tuple
    backward_fn: Optional[Callable]
    consumed: bool = False
    saved: dict = field(default_factory=dict)


class Tensor:
    """Dense array of rank <= 4 with an optional gradient.

    ``data`` is a contiguous numpy array in f32 or f64.  Tensors created by
    ops carry an :class:`OpNode` in ``ctx`` while grad recording is on.
    """

    __slots__ = ("data", "grad", "requires_grad", "ctx", "name", "no_decay")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            if dtype is None and np.issubdtype(arr.dtype, np.number):
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the 4-D limit")
        self.data = np.asarray(arr, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.ctx: Optional[OpNode] = None
        self.name = name
        self.no_decay = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; the real work is in ops
    def __add__(self, other):
        from treenet import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from treenet import ops

        return ops.mul(self, other)

    def sum(self):
        from treenet import ops

        return ops.sum_all(self)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    kind: str,
    backward_fn: Callable,
    check_finite: bool = True,
) -> Tensor:
    """Wrap an op's output and record the node when any parent needs a gradient."""
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{kind} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.ctx = OpNode(kind, tuple(parents), backward_fn)
    return out


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.ctx is not None:
            for p in t.ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; calling again without a fresh forward
    raises ``RuntimeError``.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.ctx is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
            return
        raise RuntimeError("root was not produced by a recorded graph")
    if root.ctx.consumed:
        raise RuntimeError("graph already consumed by a previous backward(); run forward again")

    order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t.ctx
        if node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.consumed:
            raise RuntimeError("graph already consumed by a previous backward(); run forward again")
        if g is not None:
            parent_grads = node.backward_fn(g)
            if node.kind in _grad_corruption:
                f = _grad_corruption[node.kind]
                parent_grads = tuple(None if pg is None else pg * f for pg in parent_grads)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node.consumed = True
        node.backward_fn = None
        node.saved.clear()
