"""Reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray. Every differentiable op is a
:class:`Function` subclass with static ``forward``/``backward`` methods;
``Function.apply`` records a :class:`Node` on the output whenever any input
requires a gradient. ``Tensor.backward`` walks the recorded graph once, in
exact reverse topological order, and then releases the saved activations.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from ..errors import GraphError, NumericError

FLOAT_TYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Context:
    """Scratch space an op uses to hand forward values to its adjoint."""

    def save(self, **values: Any) -> None:
        self.__dict__.update(values)


class Node:
    __slots__ = ("fn", "inputs", "ctx", "consumed")

    def __init__(self, fn: type[Function], inputs: tuple[Tensor, ...], ctx: Context):
        self.fn = fn
        self.inputs = inputs
        self.ctx = ctx
        self.consumed = False

    @property
    def op(self) -> str:
        return self.fn.name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    # arithmetic sugar; implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.node is None:
            if not self.requires_grad:
                raise GraphError("backward() on a tensor that is not part of a graph")
            g = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
            self.grad = g if self.grad is None else self.grad + g
            return
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topo_order(self)
        if any(t.node.consumed for t in order):
            raise GraphError("backward() called twice on the same graph; run a new forward pass first")

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for t in reversed(order):
            node = t.node
            g_out = grads.pop(id(t), None)
            node.consumed = True
            if g_out is None:
                node.ctx = None
                continue
            in_grads = node.fn.backward(node.ctx, g_out)
            node.ctx = None
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                _check_finite(g, f"{node.op} backward")
                if inp.node is None:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = g if prev is None else prev + g


def topo_order(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def graph_nodes(root: Tensor) -> list[Node]:
    return [t.node for t in topo_order(root)]


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Function:
    """Base class of a differentiable op.

    ``forward(ctx, *arrays, **kwargs)`` returns the output array;
    ``backward(ctx, grad)`` returns one gradient (or None) per tensor input.
    Keyword arguments are non-differentiable constants.
    """

    name = "function"

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in inputs), **kwargs)
        _check_finite(out, cls.name)
        result = Tensor(out)
        if any(t.requires_grad for t in inputs):
            result.requires_grad = True
            result.node = Node(cls, inputs, ctx)
        return result
