"""Dense-tensor reverse-mode automatic differentiation.

Small by design: float64 row-major storage (numpy), rank <= 3, and exactly
the operations the rest of the package needs.  Each model owns a Tape; ops
append their outputs in execution order, which is already a topological
order, so the backward pass is a single reverse sweep.
"""

from __future__ import annotations

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operation evaluated outside its mathematical domain."""


def _asarray(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense float64 array plus its place in a computation tape.

    Leaves are created through ``Tape.leaf`` (trainable, ``requires_grad``)
    or ``constant`` (no gradient, shareable across tapes).  Everything else
    is produced by the operations below.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "_parents", "_vjp", "_slot")

    def __init__(self, data, tape=None, requires_grad=False, parents=(), vjp=None):
        self.data = _asarray(data)
        self.tape = tape
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp
        self._slot = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise --------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    # -- reductions / structure ----------------------------------------

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def min(self, axis=None):
        return reduce_min(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def row(self, i):
        return row(self, i)


class Tape:
    """Ordered record of operations for one model's forward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._leaves: list[Tensor] = []

    def leaf(self, values, requires_grad=True) -> Tensor:
        t = Tensor(values, tape=self, requires_grad=requires_grad)
        self._leaves.append(t)
        return t

    def _record(self, t: Tensor) -> None:
        t._slot = len(self._nodes)
        self._nodes.append(t)

    def zero_grads(self) -> None:
        for leaf in self._leaves:
            leaf.grad = None

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf with dL/dleaf.

        Repeated calls accumulate; use ``zero_grads`` between steps.
        """
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        adjoint = {id(loss): np.ones_like(loss.data)}
        for i in range(loss._slot, -1, -1):
            node = self._nodes[i]
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            for parent, contrib in node._vjp(g):
                if not parent.requires_grad:
                    continue
                if parent._vjp is None:  # leaf
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += contrib
                else:
                    # rebind rather than +=: scalar adjoints are immutable
                    acc = adjoint.get(id(parent))
                    if acc is None:
                        adjoint[id(parent)] = np.array(contrib, dtype=np.float64)
                    else:
                        adjoint[id(parent)] = acc + contrib


def constant(values) -> Tensor:
    """A tape-free tensor: participates in math, receives no gradient."""
    if isinstance(values, Tensor):
        return values
    return Tensor(values)


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise ValueError("loss is a constant; nothing to differentiate")
    loss.tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _make(data, parents, vjp) -> Tensor:
    """Record an op output, or fold to a constant if no gradient can flow."""
    tape = None
    needs_grad = False
    for p in parents:
        if p.requires_grad or p._vjp is not None:
            needs_grad = True
            if p.tape is not None:
                if tape is None:
                    tape = p.tape
                elif tape is not p.tape:
                    raise ValueError("operands belong to different tapes")
    if not needs_grad or tape is None:
        return Tensor(data)
    out = Tensor(data, tape=tape, requires_grad=True, parents=parents, vjp=vjp)
    tape._record(out)
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- binary elementwise (equal shapes or scalar broadcast) ---------------


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} neither match nor broadcast a scalar")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    def vjp(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))
    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")
    def vjp(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(-g, b.shape)))
    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    def vjp(g):
        return ((a, _reduce_to(g * b.data, a.shape)), (b, _reduce_to(g * a.data, b.shape)))
    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    def vjp(g):
        return (
            (a, _reduce_to(g / b.data, a.shape)),
            (b, _reduce_to(-g * a.data / (b.data * b.data), b.shape)),
        )
    return _make(a.data / b.data, (a, b), vjp)


def add_rows(matrix: Tensor, vec: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    matrix, vec = _lift(matrix), _lift(vec)
    if matrix.ndim != 2 or vec.ndim != 1 or matrix.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_rows: shapes {matrix.shape} and {vec.shape}")
    def vjp(g):
        return ((matrix, g), (vec, g.sum(axis=0)))
    return _make(matrix.data + vec.data[None, :], (matrix, vec), vjp)


# -- unary elementwise ---------------------------------------------------


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: ((a, g * s * (1.0 - s)),))


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: ((a, g * (1.0 - t * t)),))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in overflow-safe form; gradient is sigmoid(x)."""
    a = _lift(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), lambda g: ((a, g * _sigmoid(a.data)),))


# -- matrix product -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1 or 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return ((a, g @ b.data.T), (b, a.data.T @ g))
        if a.ndim == 2 and b.ndim == 1:
            return ((a, np.outer(g, b.data)), (b, a.data.T @ g))
        if a.ndim == 1 and b.ndim == 2:
            return ((a, b.data @ g), (b, np.outer(a.data, g)))
        return ((a, g * b.data), (b, g * a.data))

    return _make(out, (a, b), vjp)


# -- reductions ------------------------------------------------------------


def _check_reduce(a: Tensor, axis, opname: str):
    if a.size == 0:
        raise DomainError(f"{opname} of an empty tensor")
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{opname}: axis {axis} out of range for rank {a.ndim}")


def _expand(g: np.ndarray, axis, shape) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).astype(np.float64)
    return np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64)


def reduce_sum(a, axis=None) -> Tensor:
    a = _lift(a)
    _check_reduce(a, axis, "sum")
    def vjp(g):
        return ((a, _expand(g, axis, a.shape)),)
    return _make(a.data.sum(axis=axis), (a,), vjp)


def reduce_mean(a, axis=None) -> Tensor:
    a = _lift(a)
    _check_reduce(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    def vjp(g):
        return ((a, _expand(g, axis, a.shape) / n),)
    return _make(a.data.mean(axis=axis), (a,), vjp)


def _extreme(a: Tensor, axis, argfn, valfn, opname: str) -> Tensor:
    _check_reduce(a, axis, opname)
    data = a.data
    if axis is None:
        idx = argfn(data)  # first occurrence = lowest flat index
        def vjp(g):
            mask = np.zeros_like(data)
            mask.flat[idx] = 1.0
            return ((a, mask * g),)
        return _make(valfn(data), (a,), vjp)
    idx = np.expand_dims(argfn(data, axis=axis), axis)
    def vjp(g):
        mask = np.zeros_like(data)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        return ((a, mask * np.expand_dims(g, axis)),)
    return _make(valfn(data, axis=axis), (a,), vjp)


def reduce_max(a, axis=None) -> Tensor:
    return _extreme(_lift(a), axis, np.argmax, np.max, "max")


def reduce_min(a, axis=None) -> Tensor:
    return _extreme(_lift(a), axis, np.argmin, np.min, "min")


# -- structural ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape
    def vjp(g):
        return ((a, g.reshape(orig)),)
    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    def vjp(g):
        return ((a, np.ascontiguousarray(g.T)),)
    return _make(np.ascontiguousarray(a.data.T), (a,), vjp)


def row(a, i: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"row expects a matrix, got shape {a.shape}")
    if not (0 <= i < a.shape[0]):
        raise ShapeError(f"row {i} out of range for shape {a.shape}")
    def vjp(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return ((a, full),)
    return _make(a.data[i].copy(), (a,), vjp)


def concat(tensors, axis=0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise ShapeError("concat requires matching ranks")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    def vjp(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(zip(parts, pieces))
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def stack(tensors) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise ShapeError("stack of an empty sequence")
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ShapeError("stack requires identical shapes")
    def vjp(g):
        return tuple((p, g[i]) for i, p in enumerate(parts))
    return _make(np.stack([p.data for p in parts]), tuple(parts), vjp)


def diag(v) -> Tensor:
    v = _lift(v)
    if v.ndim != 1:
        raise ShapeError(f"diag expects a vector, got shape {v.shape}")
    def vjp(g):
        return ((v, np.diagonal(g).copy()),)
    return _make(np.diag(v.data), (v,), vjp)
