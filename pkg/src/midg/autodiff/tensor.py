"""Define-by-run reverse-mode autodiff over numpy arrays.

Every operation creates a new :class:`Tensor` that records its parents and a
closure mapping the upstream gradient to one gradient per parent. Node ids
come from a global counter, so sorting reachable nodes by id in descending
order is a valid reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "ConfigError",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "get_default_dtype",
    "matmul",
    "concat",
    "stack",
    "softmax",
    "dropout",
    "grad_reverse",
    "keyed_rng",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class ContractError(AutodiffError, ValueError):
    pass


class ConfigError(AutodiffError, ValueError):
    pass


_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "midg_default_dtype", default=np.dtype(np.float32)
)
_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters.

    >>> with default_dtype(np.float64):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator: the same key always yields the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: "Tensor", b: "Tensor", op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    """Dense array node in a computation graph.

    ``grad`` is zero until a backward pass reaches this tensor and then
    accumulates across passes until :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "leaf",
    ):
        if dtype is None:
            floating = isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f"
            dtype = data.dtype if floating else get_default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.id = next(_ids)
        self.op = _op
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._grad: np.ndarray | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.dtype)

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node."""
        if self.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in nodes:
                continue
            nodes[node.id] = node
            stack.extend(p for p in node._parents if p.requires_grad and p.id not in nodes)

        pending: dict[int, np.ndarray] = {self.id: np.ones_like(self.data)}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = pending.pop(node_id, None)
            if g is None:
                continue
            node._grad = g.copy() if node._grad is None else node._grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg

    # ------------------------------------------------------------- arithmetic
    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self, other, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor(
            self.data + other.data,
            _parents=(self, other),
            _backward=lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            _op="add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self, other, "sub")
        a_shape, b_shape = self.shape, other.shape
        return Tensor(
            self.data - other.data,
            _parents=(self, other),
            _backward=lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            _op="sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self, other, "mul")
        a, b = self.data, other.data
        return Tensor(
            a * b,
            _parents=(self, other),
            _backward=lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            _op="mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self, other, "div")
        a, b = self.data, other.data
        return Tensor(
            a / b,
            _parents=(self, other),
            _backward=lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            _op="div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,), _op="neg")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._lift(other))

    # ------------------------------------------------------------ elementwise
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor(
            np.where(mask, self.data, 0).astype(self.dtype),
            _parents=(self,),
            _backward=lambda g: (g * mask,),
            _op="relu",
        )

    def sigmoid(self) -> "Tensor":
        x = self.data
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(self.dtype)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out * (1 - out),), _op="sigmoid")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * (1 - out * out),), _op="tanh")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,), _op="exp")

    def expm1(self) -> "Tensor":
        out = np.expm1(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * (out + 1),), _op="expm1")

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0) or np.any(np.isnan(x)):
            raise DomainError(f"log of non-positive value (min={np.nanmin(x) if x.size else 'n/a'})")
        return Tensor(np.log(x), _parents=(self,), _backward=lambda g: (g / x,), _op="log")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor(x * x, _parents=(self,), _backward=lambda g: (2 * g * x,), _op="square")

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor(
            np.clip(x, lo, hi), _parents=(self,), _backward=lambda g: (g * inside,), _op="clip"
        )

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(out, dtype=self.dtype, _parents=(self,), _backward=backward, _op="sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ----------------------------------------------------------------- shape
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
        return Tensor(out, _parents=(self,), _backward=lambda g: (g.reshape(old),), _op="reshape")

    @property
    def T(self) -> "Tensor":
        return Tensor(self.data.T, _parents=(self,), _backward=lambda g: (g.T,), _op="transpose")

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor(self.data[index], _parents=(self,), _backward=backward, _op="index")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return Tensor(x @ y, _parents=(a, b), _backward=lambda g: (g @ y.T, x.T @ g), _op="matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of empty sequence")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor(
        np.concatenate([t.data for t in tensors], axis=ax),
        _parents=tuple(tensors),
        _backward=lambda g: tuple(np.split(g, bounds, axis=ax)),
        _op="concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    ax = axis % (tensors[0].ndim + 1)
    return Tensor(
        np.stack([t.data for t in tensors], axis=ax),
        _parents=tuple(tensors),
        _backward=lambda g: tuple(np.moveaxis(g, ax, 0)),
        _op="stack",
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(x,), _backward=backward, _op="softmax")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is off or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return Tensor(x.data * mask, _parents=(x,), _backward=lambda g: (g * mask,), _op="dropout")


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ConfigError(f"gradient reversal strength must be nonnegative, got {lam}")
    x = as_tensor(x)
    return Tensor(x.data.copy(), _parents=(x,), _backward=lambda g: (-lam * g,), _op="grad_reverse")

