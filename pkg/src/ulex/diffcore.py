"""Reverse-mode automatic differentiation on dense numpy arrays.

Tensors record the operations that produced them, so every forward
evaluation builds an implicit computation tape. `backward` walks that
tape once, in reverse topological order, and returns exact gradients
with respect to any requested leaves (inputs, parameters, or both).

Determinism contract: all reductions use numpy's sequential/pairwise
summation on a single thread and gradient contributions accumulate in
a fixed traversal order, so identical inputs give bitwise-identical
outputs and gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class DiffcoreError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(DiffcoreError):
    """Operand shapes are incompatible for the named operation."""


class GradientError(DiffcoreError):
    """Backward was requested on an invalid output or leaf."""


class NonFiniteError(DiffcoreError):
    """An operation produced NaN or Inf."""


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        arr = np.asarray(data, dtype=dtype)
    else:
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients.

    Tensors are immutable once constructed; operations return new tensors
    that keep references to their parents. `requires_grad` marks leaves that
    gradients may be requested for and propagates to derived tensors.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        _check_finite(self.data, "leaf")

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, vjp, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        out._op = op
        _check_finite(data, op)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _shift(self, -float(other))

    def __rsub__(self, other):
        return _shift(-self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; "
                            "multiply by a precomputed reciprocal instead")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcastable(sa: tuple, sb: tuple) -> bool:
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# -- elementwise primitives --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return Tensor._from_op(out, (a,), vjp, "scale")


def _shift(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def vjp(g):
        return (g,)

    return Tensor._from_op(out, (a,), vjp, "shift")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        # subgradient at 0 is 0 by convention
        return (g * (a.data > 0),)

    return Tensor._from_op(out, (a,), vjp, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), vjp, "tanh")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a row-broadcast bias."""
    if b.data.ndim != 1:
        raise ShapeError(f"affine: bias must be 1-D, got {b.shape}")
    return add(matmul(x, w), b)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat: needs at least one tensor")
    for p in parts[1:]:
        _check_same_dtype(parts[0], p, "concat")
        if p.data.ndim != parts[0].data.ndim:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._from_op(out, tuple(parts), vjp, "concat")


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = np.sum(a.data)

    def vjp(g):
        return (np.full(a.shape, g, dtype=a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp, "sum")


def tmean(a: Tensor) -> Tensor:
    out = np.mean(a.data)

    def vjp(g):
        return (np.full(a.shape, g / a.data.size, dtype=a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp, "mean")


def l2norm(a: Tensor, axis: int | None = None) -> Tensor:
    """L2 norm of the whole tensor (axis=None) or of each row (axis=1).

    The gradient at an exactly-zero vector is taken to be 0.
    """
    if axis is None:
        out = np.sqrt(np.sum(a.data * a.data))

        def vjp(g):
            if out == 0.0:
                return (np.zeros_like(a.data),)
            return (g * (a.data / out),)

        return Tensor._from_op(out, (a,), vjp, "l2norm")

    if axis != 1 or a.data.ndim != 2:
        raise ShapeError(f"l2norm: axis=1 requires a 2-D tensor, got {a.shape}")
    out = np.sqrt(np.sum(a.data * a.data, axis=1))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (a.data * (g / safe)[:, None] * (out > 0.0)[:, None],)

    return Tensor._from_op(out, (a,), vjp, "l2norm")


# -- classification loss ------------------------------------------------------

def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-example softmax cross-entropy against integer labels.

    Returns a length-n tensor; compose with `tmean` for the batch loss.
    Uses the log-sum-exp form, so large logits do not overflow.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ShapeError(
            f"cross_entropy: labels shape {y.shape} does not match logits {logits.shape}")
    k = z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: label outside [0, {k})")
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    se = np.sum(e, axis=1)
    lse = m[:, 0] + np.log(se)
    rows = np.arange(z.shape[0])
    out = lse - z[rows, y]

    def vjp(g):
        p = e / se[:, None]
        gz = p * g[:, None]
        gz[rows, y] -= g
        return (gz,)

    return Tensor._from_op(out, (logits,), vjp, "cross_entropy")


# -- reverse pass -------------------------------------------------------------

def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar `output` with respect to each tensor in `wrt`.

    Purely functional: no state is stored on the graph, so several backward
    passes may share one forward trace. Leaves in `wrt` that the output does
    not depend on get zero gradients.
    """
    if output.data.shape != ():
        raise GradientError(
            f"backward: output must be scalar, got shape {output.data.shape}")
    for t in wrt:
        if not t.requires_grad:
            raise GradientError("backward: tensor in wrt is not marked differentiable")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(output): np.asarray(1.0, dtype=output.data.dtype)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_diff(fn: Callable[[np.ndarray], float], x: np.ndarray,
                h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    This is the test oracle the reverse pass is checked against; it never
    touches the tape machinery.
    """
    if h <= 0:
        raise ValueError("finite_diff: h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
