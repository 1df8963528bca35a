"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float64 by default, float32 via
``set_default_dtype``).  Every differentiable operation records a node on an
eager tape; ``backward`` on a scalar root walks the tape once in reverse
topological order and accumulates gradients additively.  ``stop_gradient``
is a first-class tape node whose backward contributes nothing.

Broadcasting is supported for scalars and trailing-dimension expansion; the
generic unbroadcast helper also tolerates leading batch axes.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64

_MAX_EXP = 700.0  # exp() beyond this overflows float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values lie outside the operation's domain."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense real array participating in a reverse-mode differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Gradients accumulate into ``.grad`` of every requires_grad tensor on
        the tape; existing gradients are added to, so per-sample backward
        calls accumulate across a batch.  The tape below the root is freed
        afterwards.
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the tape: intermediate results are single-use
        for node in topo:
            if node is not self:
                node._parents = ()
                node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data, parents, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(p for p in parents) if req else (), _op=op)
    return out, req


# ----------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, req = _make(a.data + b.data, (a, b), "add")
    if req:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, req = _make(a.data - b.data, (a, b), "sub")
    if req:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, req = _make(a.data * b.data, (a, b), "mul")
    if req:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, req = _make(a.data / b.data, (a, b), "div")
    if req:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out, req = _make(-a.data, (a,), "neg")
    if req:
        out._backward = lambda g: a._accumulate(-g)
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out, req = _make(a.data * c, (a,), "scale")
    if req:
        out._backward = lambda g: a._accumulate(g * c)
    return out


def texp(a) -> Tensor:
    a = as_tensor(a)
    mx = float(np.max(a.data)) if a.size else 0.0
    if mx > _MAX_EXP:
        raise DomainError(f"exp overflow: max exponent {mx} exceeds {_MAX_EXP}")
    e = np.exp(a.data)
    out, req = _make(e, (a,), "exp")
    if req:
        out._backward = lambda g: a._accumulate(g * e)
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    if a.size and float(np.min(a.data)) <= 0.0:
        raise DomainError(f"log of non-positive input: min value {float(np.min(a.data))}")
    out, req = _make(np.log(a.data), (a,), "log")
    if req:
        out._backward = lambda g: a._accumulate(g / a.data)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    out, req = _make(a.data * mask, (a,), "relu")
    if req:
        out._backward = lambda g: a._accumulate(g * mask)
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out, req = _make(a.data ** exponent, (a,), "pow")
    if req:
        def _bw(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))
        out._backward = _bw
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    s = np.sqrt(a.data)
    out, req = _make(s, (a,), "sqrt")
    if req:
        out._backward = lambda g: a._accumulate(g * 0.5 / s)
    return out


# ----------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out, req = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if req:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy() if g.shape != a.shape else g)
        out._backward = _bw
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; gradient routes to the argmax entry (lowest
    index on ties)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    vals = np.max(a.data, axis=axis, keepdims=keepdims)
    out, req = _make(vals, (a,), "max")
    if req:
        def _bw(g):
            if keepdims:
                g = np.squeeze(g, axis=axis)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
            a._accumulate(ga)
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.data.ndim != b.data.ndim and not (a.data.ndim == 2 or b.data.ndim == 2):
        raise ShapeError(f"matmul batch ranks differ: {a.shape} x {b.shape}")
    out, req = _make(a.data @ b.data, (a, b), "matmul")
    if req:
        def _bw(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out, req = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose")
    if req:
        inv = None if axes is None else tuple(np.argsort(axes))
        out._backward = lambda g: a._accumulate(g.transpose(inv))
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out, req = _make(a.data.reshape(shape), (a,), "reshape")
    if req:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out, req = _make(data, tuple(tensors), "concat")
    if req:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])
        out._backward = _bw
    return out


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out, req = _make(a.data[idx], (a,), "gather")
    if req:
        def _bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)
        out._backward = _bw
    return out


# ----------------------------------------------------------------------
# softmax and stop-gradient


def softmax(a, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, computed with max-subtraction."""
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out, req = _make(s, (a,), "softmax")
    if req:
        def _bw(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            a._accumulate((g - dot) * s / temperature)
        out._backward = _bw
    return out


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow backward."""
    a = as_tensor(a)
    out = Tensor(a.data, requires_grad=a.requires_grad, _parents=(a,), _op="stop")
    out._backward = lambda g: None
    return out
