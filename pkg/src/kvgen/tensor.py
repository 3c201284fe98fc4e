"""Dense tensors over numpy arrays with reverse-mode automatic differentiation.

The graph is built eagerly: every op that touches a tensor requiring a
gradient records its parents and a backward closure.  `backward` walks the
graph once in reverse topological order, so gradient accumulation order is
deterministic and two backward passes over identically rebuilt graphs give
bitwise-equal gradients.
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = {"float64": np.float64, "float32": np.float32}


class ShapeError(ValueError):
    """Operand shapes do not conform for a kernel."""


_grad_stack = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    _grad_stack.append(False)
    try:
        yield
    finally:
        _grad_stack.pop()


def grad_enabled() -> bool:
    return _grad_stack[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def make_op(out_data: np.ndarray, parents, grad_fns) -> Tensor:
    """Wrap a kernel result.  grad_fns[i](out_grad) yields parent i's grad."""
    parents = tuple(parents)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    out._parents = parents

    def _backward():
        g = out.grad
        for p, fn in zip(parents, grad_fns):
            if p.requires_grad and fn is not None:
                accumulate_grad(p, fn(g))

    out._backward = _backward
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad ancestor of a scalar loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            child = node._parents[idx]
            if id(child) not in visited:
                stack.append((child, 0))
        else:
            order.append(node)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
