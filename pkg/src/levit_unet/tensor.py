"""
Reverse-mode autodiff tensor.

A Tensor wraps a numpy array (float32 by default, float64 inside the
gradient-check shadow path) and records the operation graph while gradient
recording is enabled. Only the operations the LeViT-UNet architecture needs
have adjoints; everything else stays in plain numpy.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]


def is_grad_enabled() -> bool:
    """Whether ops on this thread record the graph."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread (inference, finite differences)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: "Tensor", grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if grad.shape != tensor.data.shape:
        grad = _unbroadcast(grad, tensor.data.shape)
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in items)


class Tensor:
    """Dense array value with an optional gradient.

    Tensors are treated as immutable values: ops never write into an input's
    `data`. Parameters are updated by rebinding `data` (see optim.adam_step).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, attaching `backward` when any parent needs a gradient."""
        out = cls(np.asarray(data))
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # Metadata
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # Backward pass
    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every leaf reachable from this tensor.

        The graph is released afterwards; intermediate gradients are dropped
        and only leaves (parameters, inputs) keep `.grad`.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node.grad = None

    # ------------------------------------------------------------------
    # Arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        other_data = other.data if isinstance(other, Tensor) else other

        def backward(g):
            _accumulate(self, g)
            if isinstance(other, Tensor):
                _accumulate(other, g)

        return Tensor.from_op(self.data + other_data, _tensors(self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: _accumulate(self, -g))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other_data = other.data if isinstance(other, Tensor) else other

        def backward(g):
            _accumulate(self, g)
            if isinstance(other, Tensor):
                _accumulate(other, -g)

        return Tensor.from_op(self.data - other_data, _tensors(self, other), backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return (-self) + other

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other_data = other.data if isinstance(other, Tensor) else other

        def backward(g):
            _accumulate(self, g * other_data)
            if isinstance(other, Tensor):
                _accumulate(other, g * self.data)

        return Tensor.from_op(self.data * other_data, _tensors(self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other_data = other.data if isinstance(other, Tensor) else other
        out_data = self.data / other_data

        def backward(g):
            _accumulate(self, g / other_data)
            if isinstance(other, Tensor):
                _accumulate(other, -g * out_data / other_data)

        return Tensor.from_op(out_data, _tensors(self, other), backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data

        def backward(g):
            if self.requires_grad:
                _accumulate(self, np.matmul(g, np.swapaxes(b, -1, -2)))
            if other.requires_grad:
                _accumulate(other, np.matmul(np.swapaxes(a, -1, -2), g))

        return Tensor.from_op(np.matmul(a, b), (self, other), backward)

    # ------------------------------------------------------------------
    # Shape manipulation
    # ------------------------------------------------------------------
    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape
        return Tensor.from_op(
            self.data.reshape(shape), (self,), lambda g: _accumulate(self, g.reshape(original))
        )

    def transpose(self, *axes: int) -> "Tensor":
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(
            self.data.transpose(axes), (self,), lambda g: _accumulate(self, g.transpose(inverse))
        )

    def __getitem__(self, key) -> "Tensor":
        basic = _is_basic_index(key)

        def backward(g):
            full = np.zeros_like(self.data, dtype=g.dtype)
            if basic:
                full[key] += g
            else:
                np.add.at(full, key, g)
            _accumulate(self, full)

        return Tensor.from_op(self.data[key], (self,), backward)

    # ------------------------------------------------------------------
    # Reductions and elementwise math
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, shape))

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor.from_op(out_data, (self,), lambda g: _accumulate(self, g * out_data))

    def log(self) -> "Tensor":
        return Tensor.from_op(np.log(self.data), (self,), lambda g: _accumulate(self, g / self.data))


def _tensors(*values) -> Tuple[Tensor, ...]:
    return tuple(v for v in values if isinstance(v, Tensor))


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Create a learnable float32 leaf tensor."""
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
