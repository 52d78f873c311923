"""Dense tensors with reverse-mode differentiation on top of numpy.

Every array in the library is a `Tensor` wrapping a numpy ndarray in the
globally configured precision (64-bit by default; all verification suites
run in 64-bit because finite-difference checks are meaningless in 32-bit).
Operations record a tape when gradients are enabled; `backward` walks the
tape in reverse topological order and accumulates into `Parameter.grad`
until `zero_grad` is called.

Finiteness policy: tensors built from external data are validated eagerly;
results of internal ops are not re-checked per-op (cost), the training and
checking boundaries re-validate instead.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


_DTYPE = np.float64
_GRAD_ENABLED = True

_NEG_INF = -1e30  # additive mask value; finite so masked softmax stays NaN-free


def set_precision(bits: int) -> None:
    """Switch the global float width (32 or 64) for newly created tensors."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ContractError(f"precision must be 32 or 64, got {bits}")


def precision_bits() -> int:
    return 64 if _DTYPE == np.float64 else 32


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference / FD probing)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense row-major array, optionally a node in the autodiff tape."""

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(
        self,
        data,
        _parents: tuple[Tensor, ...] = (),
        _vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        validate: bool = False,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_DTYPE)
        if validate and not np.all(np.isfinite(arr)):
            raise NumericError("tensor construction saw non-finite values")
        self.data = arr
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection -------------------------------------------------

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
    def requires_grad(self) -> bool:
        return self._vjp is not None or isinstance(self, Parameter)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # -- arithmetic sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean_(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int = -1, keepdims: bool = False) -> Tensor:
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def moveaxis(self, source: int, destination: int) -> Tensor:
        return moveaxis(self, source, destination)

    @property
    def T(self) -> Tensor:
        if self.ndim != 2:
            raise ShapeError(f".T needs a 2-D tensor, got shape {self.shape}")
        return swap_last2(self)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named trainable tensor; gradients accumulate until cleared."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str):
        super().__init__(data, validate=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad.shape == self.data.shape and self.grad.dtype == self.data.dtype:
            self.grad.fill(0.0)
        else:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DTYPE)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _GRAD_ENABLED and any(
        isinstance(p, Tensor) and p.requires_grad for p in parents
    ):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops ----------------------------------------------------


def add(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = ta.data + tb.data

    def vjp(g: np.ndarray):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _make(out, (ta, tb), vjp)


def mul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = ta.data * tb.data

    def vjp(g: np.ndarray):
        return (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        )

    return _make(out, (ta, tb), vjp)


def div(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = ta.data / tb.data

    def vjp(g: np.ndarray):
        return (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        )

    return _make(out, (ta, tb), vjp)


def exp(x) -> Tensor:
    tx = as_tensor(x)
    out = np.exp(tx.data)

    def vjp(g: np.ndarray):
        return (g * out,)

    return _make(out, (tx,), vjp)


def log(x) -> Tensor:
    tx = as_tensor(x)
    out = np.log(tx.data)

    def vjp(g: np.ndarray):
        return (g / tx.data,)

    return _make(out, (tx,), vjp)


def sqrt(x) -> Tensor:
    tx = as_tensor(x)
    out = np.sqrt(tx.data)

    def vjp(g: np.ndarray):
        return (g * 0.5 / out,)

    return _make(out, (tx,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact erf-based GELU."""
    tx = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(tx.data * _INV_SQRT2))
    out = tx.data * cdf

    def vjp(g: np.ndarray):
        pdf = np.exp(-0.5 * tx.data * tx.data) * _INV_SQRT_2PI
        return (g * (cdf + tx.data * pdf),)

    return _make(out, (tx,), vjp)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {ta.shape} and {tb.shape}"
        )
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {ta.shape} x {tb.shape}"
        )
    out = np.matmul(ta.data, tb.data)

    def vjp(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
        gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
        return _unbroadcast(ga, ta.shape), _unbroadcast(gb, tb.shape)

    return _make(out, (ta, tb), vjp)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    tx, tw = as_tensor(x), as_tensor(w)
    if tx.shape[-1] != tw.shape[0]:
        raise ShapeError(
            f"linear width mismatch: input {tx.shape} vs weight {tw.shape}"
        )
    out = matmul(tx, tw)
    if b is not None:
        out = add(out, b)
    return out


# -- reductions ----------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    out = tx.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, tx.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, tx.shape).copy(),)

    return _make(out, (tx,), vjp)


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    if axis is None:
        count = tx.size
    elif isinstance(axis, tuple):
        count = int(np.prod([tx.shape[a] for a in axis]))
    else:
        count = tx.shape[axis]
    return mul(sum_(tx, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; gradient routes to the first argmax."""
    tx = as_tensor(x)
    out = tx.data.max(axis=axis, keepdims=keepdims)
    idx = tx.data.argmax(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        g2 = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(tx.data)
        np.put_along_axis(gx, idx, g2, axis=axis)
        return (gx,)

    return _make(out, (tx,), vjp)


# -- shape manipulation ---------------------------------------------------


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    tx = as_tensor(x)
    out = tx.data.reshape(shape)

    def vjp(g: np.ndarray):
        return (g.reshape(tx.shape),)

    return _make(out, (tx,), vjp)


def moveaxis(x, source: int, destination: int) -> Tensor:
    tx = as_tensor(x)
    out = np.moveaxis(tx.data, source, destination)

    def vjp(g: np.ndarray):
        return (np.moveaxis(g, destination, source),)

    return _make(out, (tx,), vjp)


def swap_last2(x) -> Tensor:
    tx = as_tensor(x)
    out = np.swapaxes(tx.data, -1, -2)

    def vjp(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _make(out, (tx,), vjp)


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    tx = as_tensor(x)
    out = np.broadcast_to(tx.data, shape).copy()

    def vjp(g: np.ndarray):
        return (_unbroadcast(g, tx.shape),)

    return _make(out, (tx,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), vjp)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def take(x, key) -> Tensor:
    """Basic or integer-array indexing with scatter-add gradient."""
    tx = as_tensor(x)
    out = tx.data[key]
    advanced = isinstance(key, (list, np.ndarray)) or (
        isinstance(key, tuple)
        and any(isinstance(k, (list, np.ndarray)) for k in key)
    )

    def vjp(g: np.ndarray):
        gx = np.zeros_like(tx.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return _make(np.array(out, dtype=_DTYPE), (tx,), vjp)


# -- normalizations --------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stabilized softmax along `axis` (max-subtraction)."""
    tx = as_tensor(x)
    if tx.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis: shape {tx.shape}")
    shifted = tx.data - tx.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (tx,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    tx = as_tensor(x)
    if tx.shape[axis] < 1:
        raise ShapeError(f"log_softmax over empty axis: shape {tx.shape}")
    shifted = tx.data - tx.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (tx,), vjp)


def softmax_rows(x) -> Tensor:
    """Spec name for last-axis softmax over a matrix of row logits."""
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    tx, tg, tb = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = tx.shape[-1]
    if tg.shape != (d,) or tb.shape != (d,):
        raise ShapeError(
            f"layer_norm width mismatch: x {tx.shape}, gain {tg.shape}, "
            f"bias {tb.shape}"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    mu = tx.data.mean(axis=-1, keepdims=True)
    centered = tx.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * tg.data + tb.data

    def vjp(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gh = g * tg.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _make(out, (tx, tg, tb), vjp)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Unit-normalize the last axis; eps guards the zero-vector case."""
    tx = as_tensor(x)
    ss = sum_(mul(tx, tx), axis=-1, keepdims=True)
    return div(tx, sqrt(add(ss, eps)))


def masked_fill(x, keep_mask: np.ndarray) -> Tensor:
    """Add a large negative constant wherever keep_mask is False."""
    penalty = np.where(keep_mask, 0.0, _NEG_INF).astype(_DTYPE)
    return add(as_tensor(x), Tensor(penalty))


# -- reverse pass ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad.

    Repeated calls keep accumulating until the parameters are cleared;
    parameters not on the tape are left untouched (zero if freshly cleared).
    """
    if loss.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    if isinstance(loss, Parameter):
        loss.grad = loss.grad + seed
        return
    if loss._vjp is None:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._vjp is not None and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if isinstance(parent, Parameter):
                parent.grad += pg  # grad buffer is owned, in-place is safe
            elif parent._vjp is not None:
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg


def check_finite(x, context: str) -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
