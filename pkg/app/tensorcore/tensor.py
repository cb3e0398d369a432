"""Dense tensors with reverse-mode gradients on a numpy backend."""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DEFAULT_DTYPE: ContextVar = ContextVar("tensor_dtype", default=np.float32)


def default_dtype() -> type:
    """Floating dtype used for tensors created without an explicit dtype."""
    return _DEFAULT_DTYPE.get()


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision inside the block.

    Used for finite-difference gradient checks. The setting is per thread/context.
    """
    token = _DEFAULT_DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Shaped float array that records the operations producing it.

    Attributes:
        data: Backing numpy array (float32, or float64 in shadow mode)
        requires_grad: Whether gradients flow to this tensor
        grad: Accumulated gradient for leaf tensors after ``backward``
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[type] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
    ):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        """Wrap an op result, enforcing finiteness and recording the graph edge."""
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values produced (shape {data.shape})")
        requires = any(p.requires_grad for p in parents)
        return cls(
            data,
            requires_grad=requires,
            dtype=data.dtype,
            _parents=parents if requires else (),
            _backward=backward if requires else None,
        )

    def _lift(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    # -- properties -----------------------------------------------------------

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
        """Copy of the data."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same data, cut from the graph."""
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        if np.any(b.data == 0):
            raise NumericalError("division by zero")

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        def backward(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b.data, g * a.data
            if a.ndim == 1:
                return b.data @ g, np.outer(a.data, g)
            if b.ndim == 1:
                return np.outer(g, b.data), a.data.T @ g
            return g @ b.data.T, a.data.T @ g

        return Tensor._result(np.asarray(a.data @ b.data), (a, b), backward)

    # -- shape and reductions ---------------------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else axis
                axes = tuple(ax % len(shape) for ax in axes)
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {original} to {shape}") from e
        return Tensor._result(out, (self,), lambda g: (g.reshape(original),))

    def flatten(self) -> "Tensor":
        return self.reshape(-1)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        dtype = self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), backward)


class Parameter(Tensor):
    """Learnable tensor; ``grad`` always has the value's shape."""

    def __init__(self, data: ArrayLike, dtype: Optional[type] = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype: type) -> None:
        """Recast in place (used to move a model into 64-bit shadow mode)."""
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf requiring grad.

    Raises:
        ShapeError: If ``loss`` is not a single-element tensor
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a loss with no trainable inputs")
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
