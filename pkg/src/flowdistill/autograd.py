"""Dense tensors with tape-free reverse-mode differentiation.

Each :class:`Tensor` produced by an op remembers its parents and a closure
mapping the upstream gradient to gradients for those parents.  Nodes carry a
monotonically increasing creation id, so sorting the ancestors of a loss by
id (descending) is a valid reverse topological order.

Arrays are float32 by default; pass float64 data to run in verification mode.
Every op keeps the dtype of its tensor operands.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence

import numpy as np

from .exceptions import BoundsError, ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "concat",
    "take",
    "gather_rows",
    "relu",
    "softplus",
    "exp",
    "log",
    "abs",
    "square",
    "sqrt",
    "sum",
    "mean",
    "reshape",
    "scale",
    "backward",
    "grad_check",
]

_node_ids = itertools.count()

DEFAULT_DTYPE = np.float32

# Side-of-kink patterns of non-smooth ops, collected only while grad_check probes.
_kink_log: list[np.ndarray] | None = None


def _note_kinks(side: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(side)


class Tensor:
    """An immutable n-d array that may participate in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        # freeze a view so the caller's array stays writable
        self.data = np.ascontiguousarray(arr, dtype=dtype).view()
        self.data.flags.writeable = False
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    # a float64 sum is non-finite iff some element is (no overflow from finite float32/64 inputs at these sizes)
    if not np.isfinite(np.add.reduce(out, axis=None, dtype=np.float64)):
        raise NumericalError(f"{op} produced non-finite values")
    return out


def _make(out: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out, dtype=out.dtype)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = grad_fn
    return t


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = _coerce_pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- elementwise binary


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * B, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(A * B, (a, b), grad_fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    x = as_tensor(x)
    c = x.dtype.type(c)

    def grad_fn(g):
        return (g * c,)

    return _make(x.data * c, (x,), grad_fn, "scale")


# ---------------------------------------------------------------- elementwise unary


def relu(x: Tensor) -> Tensor:
    X = x.data
    _note_kinks(X > 0)

    def grad_fn(g):
        return (g * (X > 0),)

    return _make(np.maximum(X, 0), (x,), grad_fn, "relu")


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^-|x|)."""
    X = x.data
    out = np.maximum(X, 0) + np.log1p(np.exp(-np.abs(X)))

    def grad_fn(g):
        # logistic sigmoid, stable for both signs
        e = np.exp(-np.abs(X))
        sig = np.where(X >= 0, 1 / (1 + e), e / (1 + e))
        return (g * sig,)

    return _make(out.astype(X.dtype, copy=False), (x,), grad_fn, "softplus")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (x,), grad_fn, "exp")


def log(x: Tensor) -> Tensor:
    X = x.data
    if (X <= 0).any():
        raise NumericalError("log of a non-positive value")

    def grad_fn(g):
        return (g / X,)

    return _make(np.log(X), (x,), grad_fn, "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Absolute value; the subgradient at exactly 0 is 0."""
    X = x.data
    _note_kinks(np.sign(X))

    def grad_fn(g):
        return (g * np.sign(X),)

    return _make(np.abs(X), (x,), grad_fn, "abs")


def square(x: Tensor) -> Tensor:
    X = x.data

    def grad_fn(g):
        return (g * 2 * X,)

    return _make(X * X, (x,), grad_fn, "square")


def sqrt(x: Tensor) -> Tensor:
    X = x.data
    if (X < 0).any():
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(X)

    def grad_fn(g):
        return (g / (2 * out),)

    return _make(out, (x,), grad_fn, "sqrt")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ContractError("mean over an empty tensor")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {shape}") from None

    def grad_fn(g):
        return (g.reshape(old),)

    return _make(out, (x,), grad_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def _getitem(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) slicing."""
    items = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in items):
        raise ContractError("only basic slicing is supported; use take() for index arrays")
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), grad_fn, "slice")


def _scatter_add(g: np.ndarray, idx: np.ndarray, axis: int, shape) -> np.ndarray:
    """Sum slices of ``g`` along ``axis`` into ``shape`` at positions ``idx``."""
    full = np.zeros(shape, dtype=g.dtype)
    if idx.size == 0:
        return full
    g = np.moveaxis(g, axis, 0)
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    sums = np.add.reduceat(g[order], starts, axis=0)
    np.moveaxis(full, axis, 0)[uniq] = sums
    return full


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; the backward pass scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    ax = axis % x.data.ndim
    n = x.shape[ax]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise BoundsError(f"index {int(idx[bad][0])} out of range for axis of size {n}")
    shape = x.shape

    def grad_fn(g):
        return (_scatter_add(g, idx, ax, shape),)

    return _make(np.take(x.data, idx, axis=ax), (x,), grad_fn, "take")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for a 2-d table."""
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got shape {table.shape}")
    return take(table, idx, axis=0)


# ---------------------------------------------------------------- differentiation


def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tensor in ``params``.

    Parameters never reached by the graph get an all-zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape, dtype=loss.dtype)}
    wanted = {t._id for t in params.values()}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        for node in _ancestors(loss):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._id in wanted:
                leaf_grads[node._id] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
    out = {}
    for name, t in params.items():
        g = leaf_grads.get(t._id)
        out[name] = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out


def _same_piece(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    build_loss: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    *,
    max_halvings: int = 30,
    report: dict | None = None,
) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``build_loss`` receives a dict of tensors keyed like ``params`` and must be a
    deterministic function of them (freeze any sampling noise beforehand).
    Arrays are promoted to float64. The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.

    ``relu`` and ``abs`` are piecewise smooth. When a probe at ``+-eps``
    lands on a different side of one of their kinks than the base point, the
    step for that coordinate is halved (up to ``max_halvings`` times) until
    both probes stay on the base point's piece. Coordinates that never get
    there sit on a kink, have no derivative, and are skipped. Pass a dict as
    ``report`` to receive ``{"halved": n, "skipped": n, "checked": n}``.
    """
    global _kink_log
    if not eps > 0:
        raise ContractError(f"grad_check needs eps > 0, got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays) -> tuple[float, list[np.ndarray]]:
        global _kink_log
        _kink_log = []
        try:
            value = build_loss({k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}).item()
            kinks = _kink_log
        finally:
            _kink_log = None
        if not np.isfinite(value):
            raise NumericalError("grad_check: loss is not finite")
        return value, kinks

    _, base_kinks = evaluate(base)
    leaves = {k: Tensor(v, requires_grad=True, name=k, dtype=np.float64) for k, v in base.items()}
    loss = build_loss(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericalError("grad_check: loss is not finite")
    analytic = backward(loss, leaves)

    worst = 0.0
    halved = skipped = checked = 0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = eps
            for attempt in range(max_halvings + 1):
                flat[i] = orig + step
                f_plus, k_plus = evaluate(base)
                flat[i] = orig - step
                f_minus, k_minus = evaluate(base)
                flat[i] = orig
                if _same_piece(k_plus, base_kinks) and _same_piece(k_minus, base_kinks):
                    break
                step /= 2
            else:
                skipped += 1
                continue
            halved += attempt > 0
            checked += 1
            numeric = (f_plus - f_minus) / (2 * step)
            err = np.abs(ga[i] - numeric) / max(np.abs(ga[i]), 1e-8)
            worst = max(worst, float(err))
    if report is not None:
        report.update(halved=halved, skipped=skipped, checked=checked)
    return worst
