"""Dense tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`; outside a
tape nothing is recorded and tensors behave as plain values.  Arrays are numpy
arrays in the engine's current scalar precision (32-bit by default, 64-bit
under :func:`precision` or ``MWDS_PRECISION=64``).
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckError",
    "get_dtype",
    "set_precision",
    "precision",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "stack",
    "grad_check",
]


class GradCheckError(ArithmeticError):
    """Raised when a function is non-finite at a finite-difference probe."""


def _dtype_from_env() -> np.dtype:
    bits = os.environ.get("MWDS_PRECISION", "32").strip()
    if bits not in ("32", "64"):
        raise ValueError(f"MWDS_PRECISION must be 32 or 64, got {bits!r}")
    return np.dtype(np.float64 if bits == "64" else np.float32)


_DTYPE = _dtype_from_env()
_local = threading.local()


def get_dtype() -> np.dtype:
    return _DTYPE


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.dtype(np.float64 if bits == 64 else np.float32)


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the engine's scalar precision."""
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if old == np.float64 else 32)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations for one backward pass.

    Use as a context manager; every op evaluated inside it whose inputs
    require gradients appends a node.  Nodes are appended in evaluation order,
    so the record is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # outputs point back through a weak reference so a finished tape is
        # freed by refcounting instead of waiting for the cycle collector
        self._ref = weakref.ref(self)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def _record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        out._node = len(self.nodes)
        out._tape = self._ref
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, output: "Tensor", grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if output.data.size != 1:
                raise ValueError(
                    f"backward needs an explicit gradient for shape {output.shape}"
                )
            grad = np.ones_like(output.data)
        pending: dict[int, np.ndarray] = {}
        if output._tape is self._ref and output._node is not None:
            pending[output._node] = np.asarray(grad, dtype=output.data.dtype)
            start = output._node
        else:
            output._accumulate(grad)
            return
        for idx in range(start, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self._ref and inp._node is not None:
                    prev = pending.get(inp._node)
                    pending[inp._node] = gi if prev is None else prev + gi
                else:
                    inp._accumulate(gi)

    def gradient(self, output: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Return gradients of ``output`` for ``wrt``; unreached inputs get zeros."""
        for t in wrt:
            t.grad = None
        self.backward(output)
        return [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt
        ]


class Tensor:
    """A dense real array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim and any(s <= 0 for s in arr.shape):
            raise ValueError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self._tape: weakref.ref | None = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def square(self):
        return mul(self, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads are needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out._tape = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape._record(out, inputs, backward)
    return out


def _check_bias_shape(a_shape, b_shape, op: str) -> None:
    if a_shape == b_shape or b_shape == () or (len(b_shape) == 1 and a_shape[-1:] == b_shape):
        return
    raise ValueError(f"{op}: cannot combine shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_bias_shape(a.shape, b.shape, "add")
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return g, _reduce_to(g, b_shape)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_bias_shape(a.shape, b.shape, "mul")
    ad, bd, b_shape = a.data, b.data, b.shape

    def backward(g):
        return g * bd, _reduce_to(g * ad, b_shape)

    return _make(ad * bd, (a, b), backward)


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def tlog(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), backward)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    items = [as_tensor(t) for t in items]
    data = np.stack([t.data for t in items])
    return _make(data, tuple(items), lambda g: tuple(g[i] for i in range(len(items))))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` is an optional boolean array broadcastable to ``x``; positions
    where it is False receive probability exactly zero.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    y = xhat * gd + bias.data

    def backward(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(y, (x, gain, bias), backward)


# -- gradient oracle -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Largest relative error between the tape gradient and central differences.

    Runs in 64-bit.  ``coords`` restricts the probe to a subset of flat
    coordinates (all by default).
    """
    with precision(64):
        x0 = np.array(as_tensor(point).data, dtype=np.float64)
        p = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(p)
        if y.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        (analytic,) = tape.gradient(y, [p])
        analytic = analytic.reshape(-1)
        flat = x0.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            probes = []
            for sign in (1.0, -1.0):
                xp = flat.copy()
                xp[i] += sign * epsilon
                v = float(f(Tensor(xp.reshape(x0.shape))).data)
                if not math.isfinite(v):
                    raise GradCheckError(f"non-finite value {v} at coordinate {i}")
                probes.append(v)
            central = (probes[0] - probes[1]) / (2 * epsilon)
            a = float(analytic[i])
            err = abs(a - central) / max(1e-8, abs(a) + abs(central))
            worst = max(worst, err)
        return worst
