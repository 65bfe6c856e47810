"""Dense float64 tensors with a reverse-mode gradient graph.

Tensors are rank 0..3 (batch x features x time at most). Every differentiable
operation is built through :func:`make_op`, which records an :class:`OpNode`
holding the inputs and a closure that maps the upstream gradient to input
gradients. :meth:`Tensor.backward` walks that graph once in reverse
topological order.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, GraphStateError, NonFiniteError, ShapeError

MAX_RANK = 3

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the maximum rank {MAX_RANK}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


@dataclass(eq=False)
class OpNode:
    """One recorded operation in the gradient graph."""

    kind: str
    inputs: tuple
    backward: Optional[BackwardFn]
    output: Optional[weakref.ref] = None
    swept: bool = field(default=False)


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Values; converted to a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should flow to (or through) this tensor.
    name : str, optional
        Label used in error messages and gradient reports.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _node: Optional[OpNode] = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_shape(arr.shape)
        if not np.isfinite(arr).all():
            label = f" '{name}'" if name else ""
            raise NonFiniteError(f"tensor{label} contains NaN or Inf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node = _node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf tensor that requires gradients.

        Gradients from several consumers of the same tensor are summed. A
        graph can be swept once; leaves must have their gradients reset with
        :func:`zero_grad` before a new sweep reaches them.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            if self.requires_grad:
                if self.grad is not None:
                    raise GraphStateError("gradient already populated; call zero_grad first")
                self.grad = np.ones_like(self.data)
            return
        if self.node.swept:
            raise GraphStateError("this graph has already been swept")

        order = _topological_order(self)
        for t in order:
            if t.is_leaf and t.requires_grad and t.grad is not None:
                label = t.name or repr(t)
                raise GraphStateError(f"stale gradient on {label}; call zero_grad before another sweep")

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if t.is_leaf:
                if t.requires_grad and g is not None:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            node = t.node
            node.swept = True
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{node.kind} backward produced gradient {ig.shape} for input {inp.shape}")
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
            # saved activations are no longer needed
            node.backward = None


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def make_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward`` receives dL/d(output) and returns one gradient (or None) per
    input. No node is recorded when no input requires gradients.
    """
    inputs = tuple(inputs)
    if not any(t.requires_grad for t in inputs):
        return Tensor(data)
    node = OpNode(kind, inputs, backward)
    out = Tensor(data, requires_grad=True, _node=node)
    node.output = weakref.ref(out)
    return out


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_create(shape, fill=0.0, *, seed: Optional[int] = None, low: float = -1.0,
                  high: float = 1.0, requires_grad: bool = False,
                  name: Optional[str] = None) -> Tensor:
    """Create a tensor of ``shape`` filled with a constant or seeded random values.

    ``fill`` is either a number or one of ``"uniform"`` (on ``[low, high)``)
    and ``"normal"``; random fills need a 64-bit integer ``seed``.
    """
    shape = _check_shape(shape)
    if isinstance(fill, str):
        if seed is None:
            raise ContractError(f"random fill {fill!r} needs a seed")
        rng = np.random.default_rng(np.uint64(seed))
        if fill == "uniform":
            data = rng.uniform(low, high, size=shape)
        elif fill == "normal":
            data = rng.standard_normal(size=shape)
        else:
            raise ContractError(f"unknown fill {fill!r}")
    else:
        data = np.full(shape, float(fill))
    return Tensor(data, requires_grad=requires_grad, name=name)
