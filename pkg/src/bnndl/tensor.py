"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the rest of the package needs are provided. Every op
builds a node holding its parents and a closure that maps the upstream
gradient to one gradient per parent; :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order.

Subgradient conventions at kinks are fixed: ``relu_pos'(0) = 0``,
``abs'(0) = 0`` and :func:`minimum` routes the gradient to its first
argument on ties.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the dtype used for tensors built from non-float data."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real array with an optional accumulated gradient.

    ``values`` is the underlying ndarray (float32 or float64). ``grad`` is
    allocated lazily by :meth:`backward` and always matches ``values`` in
    shape and dtype.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(values, Tensor):
            values = values.values
        arr = np.asarray(values)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.values: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.item())

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- autograd ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor.

        Without ``grad`` the tensor must hold a single element and is seeded
        with 1. Gradients accumulate into ``.grad`` of every reachable leaf
        and intermediate tensor that requires grad.
        """
        if grad is None:
            if self.values.size != 1:
                raise ConfigError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.values)
        else:
            grad = np.asarray(grad, dtype=self.values.dtype)
        order = topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
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

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of every node reachable from ``root``."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def make_node(values: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, attaching the graph edge only when needed."""
    parents = tuple(parents)
    out = Tensor(values, dtype=values.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.values + b.values
    return make_node(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.values, b.values
    return make_node(
        av * bv,
        (a, b),
        lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)),
    )


def relu_pos(a: Tensor) -> Tensor:
    """``(x)_+ = max(x, 0)``; derivative 0 at exactly 0."""
    mask = a.values > 0
    return make_node(np.where(mask, a.values, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.values)
    return make_node(np.abs(a.values), (a,), lambda g: (g * sgn,))


def square(a: Tensor) -> Tensor:
    av = a.values
    return make_node(av * av, (a,), lambda g: (2 * av * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return make_node(out, (a,), lambda g: (g / (2 * out),))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the whole gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values)
    return make_node(
        out,
        (a, b),
        lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)),
    )


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_node(a.values.reshape(shape), (a,), lambda g: (g.reshape(src),))


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _count(shape, axes) -> int:
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if _count(a.shape, axes) == 0:
        raise ConfigError("reduction over an empty axis")
    out = np.sum(a.values, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return make_node(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = _count(a.shape, axes)
    if n == 0:
        raise ConfigError("reduction over an empty axis")
    out = np.mean(a.values, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return make_node(np.asarray(out), (a,), lambda g: (_expand(g / n, a.shape, axes, keepdims),))


def std_population(a: Tensor, axis=None, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """``sqrt(mean((x - mean(x))**2) + eps)`` with the biased estimator."""
    axes = _norm_axes(axis, a.ndim)
    n = _count(a.shape, axes)
    if n == 0:
        raise ConfigError("reduction over an empty axis")
    x = a.values.astype(np.float64)
    centered = x - x.mean(axis=axes, keepdims=True)
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    std_k = np.sqrt(var + eps)
    out = std_k if keepdims else np.squeeze(std_k, axis=axes)

    def backward(g):
        gk = _expand(g, std_k.shape, axes, keepdims) if not keepdims else g
        return ((gk * centered / (n * std_k)).astype(a.dtype),)

    return make_node(np.asarray(out, dtype=a.dtype), (a,), backward)
