"""Rank-4 tensor values with reverse-mode automatic differentiation.

Everything in this package flows through the two classes here: ``Tensor``, a
numpy-backed (N, C, H, W) array value, and ``Tape``, an explicit record of the
operations executed while it is active. Gradients are only tracked inside a
``with Tape() as tape:`` block; calling the same functions outside a tape is
plain (and cheaper) forward arithmetic, which is how inference and the
finite-difference oracle run.

Design notes:
  * one tape per forward pass; ``Tape.backward`` consumes it and frees the
    recorded closures,
  * broadcasting is size-1 expansion only (all operands are rank 4; a
    ``Scalar`` is a 1x1x1x1 tensor),
  * float32 is the working precision, float64 is used by gradient checks and
    metrics; ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes cannot be combined (broadcast, slice, or contract)."""


class TapeError(RuntimeError):
    """Invalid tape usage: double backward, non-scalar loss, and friends."""


def _as_rank4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > 4:
        raise ShapeError(f"tensors are rank 4 at most, got shape {arr.shape}")
    if arr.ndim < 4:
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return arr


class Tensor:
    """A rank-4 (N, C, H, W) array value.

    Lower-rank input data is left-padded with singleton dimensions, so
    ``Tensor([1.0, 2.0])`` has shape (1, 1, 1, 2). ``grad`` is populated by
    ``Tape.backward`` on tensors the caller created with
    ``requires_grad=True``; tensors produced by ops are intermediates and do
    not retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = _as_rank4(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with gradient flow cut."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        """A fresh leaf with the same values in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=None, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype or DEFAULT_DTYPE), requires_grad)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=None) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=dtype or DEFAULT_DTYPE))

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flags})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None) -> "Tensor":
        return reduce_sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce_mean(self, axes)


class Scalar(Tensor):
    """A single learnable or constant value, broadcastable to any shape."""

    def __init__(self, value: float, requires_grad: bool = False, dtype=None):
        super().__init__(
            np.full((1, 1, 1, 1), float(value), dtype=dtype or DEFAULT_DTYPE),
            requires_grad,
        )


# --------------------------------------------------------------------------
# tape machinery


class TapeNode:
    __slots__ = ("name", "inputs", "outputs", "backward", "needs")

    def __init__(self, name, inputs, outputs, backward, needs):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward
        self.needs = needs


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` once. The reverse walk accumulates gradients by
    addition (a value used twice receives the sum of both paths) and frees
    the recorded nodes when it finishes.
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def first_nonfinite(self) -> str | None:
        """Name of the first recorded op whose output holds NaN/Inf, if any."""
        for node in self._nodes:
            for out in node.outputs:
                if not np.all(np.isfinite(out.data)):
                    return node.name
        return None

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("tape already consumed; build a new tape per forward pass")
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self._nodes):
            gouts = []
            any_grad = False
            for out in node.outputs:
                g = grads.get(id(out))
                if g is None:
                    g = np.zeros_like(out.data)
                else:
                    any_grad = True
                gouts.append(g)
            if not any_grad:
                continue
            gins = node.backward(tuple(gouts), node.needs)
            for inp, gin, needed in zip(node.inputs, gins, node.needs):
                if not needed or gin is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gin if prev is None else prev + gin
                holders[id(inp)] = inp

        for tensor in holders.values():
            if tensor.requires_grad and not tensor._produced:
                g = grads[id(tensor)]
                tensor.grad = g if tensor.grad is None else tensor.grad + g

        self._nodes.clear()


def record(name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
    """Register one executed op on the active tape, if any.

    ``backward`` is called as ``backward(grad_outputs, needs)`` and must
    return one gradient array (or None) per input; entries whose ``needs``
    flag is False may be skipped by the closure.
    """
    tape = active_tape()
    if tape is None:
        return
    needs = tuple(t.requires_grad for t in inputs)
    if not any(needs):
        return
    for out in outputs:
        out.requires_grad = True
        out._produced = True
    tape._nodes.append(TapeNode(name, tuple(inputs), tuple(outputs), backward, needs))


# --------------------------------------------------------------------------
# helpers shared by the ops


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(np.full((1, 1, 1, 1), float(x), dtype=dtype))
    raise TypeError(f"expected Tensor or number, got {type(x).__name__}")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _coerce(b, a.data.dtype)
    if isinstance(b, Tensor):
        return _coerce(a, b.data.dtype), b
    a = _coerce(a, DEFAULT_DTYPE)
    return a, _coerce(b, a.data.dtype)


def _check_broadcast(sa, sb) -> None:
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axes) -> tuple[int, ...]:
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if a < 0 or a > 3:
            raise ShapeError(f"axis {a} out of range for rank-4 tensor")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axis in {axes}")
    return axes


# --------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape

    def backward(gouts, needs):
        (g,) = gouts
        ga = _unbroadcast(g, sa) if needs[0] else None
        gb = _unbroadcast(g, sb) if needs[1] else None
        return ga, gb

    record("add", (a, b), (out,), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    sa, sb = a.shape, b.shape

    def backward(gouts, needs):
        (g,) = gouts
        ga = _unbroadcast(g, sa) if needs[0] else None
        gb = _unbroadcast(-g, sb) if needs[1] else None
        return ga, gb

    record("sub", (a, b), (out,), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    da, db = a.data, b.data

    def backward(gouts, needs):
        (g,) = gouts
        ga = _unbroadcast(g * db, da.shape) if needs[0] else None
        gb = _unbroadcast(g * da, db.shape) if needs[1] else None
        return ga, gb

    record("mul", (a, b), (out,), backward)
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    da, db = a.data, b.data

    def backward(gouts, needs):
        (g,) = gouts
        ga = _unbroadcast(g / db, da.shape) if needs[0] else None
        gb = _unbroadcast(-g * da / (db * db), db.shape) if needs[1] else None
        return ga, gb

    record("div", (a, b), (out,), backward)
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def backward(gouts, needs):
        return (-gouts[0],)

    record("neg", (x,), (out,), backward)
    return out


def absolute(x: Tensor) -> Tensor:
    """|x| with sign subgradient (0 at the kink)."""
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)

    def backward(gouts, needs):
        return (gouts[0] * sign,)

    record("abs", (x,), (out,), backward)
    return out


def sqrt(x: Tensor) -> Tensor:
    val = np.sqrt(x.data)
    out = Tensor(val)

    def backward(gouts, needs):
        return (gouts[0] / (2.0 * val),)

    record("sqrt", (x,), (out,), backward)
    return out


def power(x: Tensor, p: float) -> Tensor:
    """x**p for a python-float exponent; fractional p expects positive data."""
    p = float(p)
    val = x.data**p
    out = Tensor(val)
    dx = x.data

    def backward(gouts, needs):
        return (gouts[0] * p * dx ** (p - 1.0),)

    record("pow", (x,), (out,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    val = np.empty_like(d)
    pos = d >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = Tensor(val)

    def backward(gouts, needs):
        return (gouts[0] * val * (1.0 - val),)

    record("sigmoid", (x,), (out,), backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    phi = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = Tensor(d * phi)

    def backward(gouts, needs):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
        return (gouts[0] * (phi + d * pdf),)

    record("gelu", (x,), (out,), backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes through inside [lo, hi] and is zero outside."""
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(gouts, needs):
        return (gouts[0] * inside,)

    record("clamp", (x,), (out,), backward)
    return out


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b; the mask is a constant boolean array."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, a.data, b.data)
    out = Tensor(out_data)
    sa, sb = a.shape, b.shape

    def backward(gouts, needs):
        (g,) = gouts
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(mask, g, zero), sa) if needs[0] else None
        gb = _unbroadcast(np.where(mask, zero, g), sb) if needs[1] else None
        return ga, gb

    record("where", (a, b), (out,), backward)
    return out


# --------------------------------------------------------------------------
# reductions and indexing


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    out = Tensor(np.sum(x.data, axis=axes, keepdims=True))
    shape = x.shape

    def backward(gouts, needs):
        return (np.broadcast_to(gouts[0], shape).copy(),)

    record("sum", (x,), (out,), backward)
    return out


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = Tensor(np.sum(x.data, axis=axes, keepdims=True) / count)
    shape = x.shape
    inv = 1.0 / count

    def backward(gouts, needs):
        return (np.broadcast_to(gouts[0] * inv, shape).copy(),)

    record("mean", (x,), (out,), backward)
    return out


def reduce(x: Tensor, op: str, axes=None) -> Tensor:
    """Named-reduction dispatch; reduced dimensions stay as size 1."""
    if op == "sum":
        return reduce_sum(x, axes)
    if op == "mean":
        return reduce_mean(x, axes)
    raise ValueError(f"unknown reduction {op!r}")


def _reduce_extreme(x: Tensor, axis: int, use_max: bool) -> Tensor:
    axes = _norm_axes(axis)
    if len(axes) != 1:
        raise ShapeError("max/min reduce exactly one axis")
    ax = axes[0]
    fwd = np.max if use_max else np.min
    arg = np.argmax if use_max else np.argmin
    out = Tensor(fwd(x.data, axis=ax, keepdims=True))
    data = x.data

    def backward(gouts, needs):
        # subgradient: route to the first extremal element along the axis
        idx = arg(data, axis=ax, keepdims=True)
        g = np.zeros_like(data)
        np.put_along_axis(g, idx, gouts[0], axis=ax)
        return (g,)

    record("max" if use_max else "min", (x,), (out,), backward)
    return out


def reduce_max(x: Tensor, axis: int) -> Tensor:
    return _reduce_extreme(x, axis, use_max=True)


def reduce_min(x: Tensor, axis: int) -> Tensor:
    return _reduce_extreme(x, axis, use_max=False)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    (ax,) = _norm_axes(axis)
    if start < 0 or length < 1 or start + length > x.shape[ax]:
        raise ShapeError(f"slice [{start}:{start + length}] out of range for axis {ax} of {x.shape}")
    index = [slice(None)] * 4
    index[ax] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index].copy())
    shape = x.shape

    def backward(gouts, needs):
        g = np.zeros(shape, dtype=gouts[0].dtype)
        g[index] = gouts[0]
        return (g,)

    record("narrow", (x,), (out,), backward)
    return out


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """Depth-to-space: (N, C*r*r, H, W) -> (N, C, r*H, r*W)."""
    n, c, h, w = x.shape
    r = int(factor)
    if c % (r * r) != 0:
        raise ShapeError(f"channels {c} not divisible by {r}*{r}")
    cout = c // (r * r)
    val = (
        x.data.reshape(n, cout, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, cout, h * r, w * r)
    )
    out = Tensor(np.ascontiguousarray(val))

    def backward(gouts, needs):
        g = (
            gouts[0]
            .reshape(n, cout, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(g),)

    record("pixel_shuffle", (x,), (out,), backward)
    return out


# --------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Deliberately knows nothing about the tape; this is the oracle the
    backward pass is checked against. Run it in float64.
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = _scalar_value(f(Tensor(base.copy())))
        flat[i] = keep - eps
        fm = _scalar_value(f(Tensor(base.copy())))
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def grad_rel_err(got, want) -> float:
    """max over elements of |g - g_ref| / (|g| + |g_ref| + 1e-8)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        raise ShapeError(f"gradient shapes differ: {got.shape} vs {want.shape}")
    return float(np.max(np.abs(got - want) / (np.abs(got) + np.abs(want) + 1e-8)))
