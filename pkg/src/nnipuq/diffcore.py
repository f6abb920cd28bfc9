"""Reverse-mode differentiation over numpy arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so the backward pass can itself be recorded (``create_graph=True``)
and differentiated once more. That is what force-matching losses and
uncertainty gradients with respect to positions need: forces are a first
derivative of the energy, and we differentiate functions of the forces.

Nesting is limited to depth two. A gradient of a quantity that was itself
built from second derivatives raises :class:`NestingDepthError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "ParamVector",
    "NumericFailure",
    "NestingDepthError",
    "grad",
    "grad_of_grad",
    "no_record",
    "as_tensor",
    "constant",
    "exp", "log", "tanh", "sqrt", "sin", "cos", "softplus", "sigmoid",
    "absolute", "lgamma", "digamma", "matmul", "concatenate", "stack",
    "logsumexp", "square", "maximum_const",
]

MAX_DEPTH = 2


class NumericFailure(FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by operation '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NestingDepthError(RuntimeError):
    pass


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextlib.contextmanager
def no_record():
    """Evaluate primitives without building a graph."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


@contextlib.contextmanager
def _record_as(flag: bool):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "order", "op", "_parents", "_vjps")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, order: int = 0, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.order = order
        self.op = op
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- array protocol ---------------------------------------------------
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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


# Ops that cannot turn finite inputs into non-finite outputs (short of float
# overflow, which is caught at the next checked node or at grad time).
_UNCHECKED = frozenset({"add", "sub", "neg", "mul", "matmul", "sum", "mean", "sum_to", "broadcast_to",
                        "reshape", "transpose", "getitem", "scatter", "concatenate", "stack",
                        "sin", "cos", "tanh", "sigmoid", "abs", "maximum"})


def _check_finite(data: np.ndarray, op: str) -> None:
    # nan and inf both survive a sum; s - s is nonzero (nan) only then
    total = data.sum()
    if total - total != 0:
        raise NumericFailure(op)


def _make(data, op: str, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    if type(data) is not np.ndarray or data.dtype != np.float64:
        data = np.asarray(data, dtype=np.float64)
    if op not in _UNCHECKED:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if len(parents) == 1:
        p0 = parents[0]
        out.order = p0.order
        tracked = p0.requires_grad
    else:
        out.order = max(p.order for p in parents)
        tracked = any(p.requires_grad for p in parents)
    if tracked and getattr(_state, "record", True):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


# -- shape primitives -------------------------------------------------------

def sum_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(_sum_to_shape(a.data, shape), "sum_to", (a,), (lambda g: broadcast_to(g, src),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), "broadcast_to", (a,), (lambda g: sum_to(g, src),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), (lambda g: reshape(g, src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), (lambda g: transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    return _make(a.data[idx], "getitem", (a,), (lambda g: scatter(g, idx, src),))


def scatter(g: Tensor, idx, shape: tuple) -> Tensor:
    """Place ``g`` at ``idx`` inside zeros of ``shape`` (adjoint of indexing)."""
    out = np.zeros(shape)
    if _fancy(idx):
        np.add.at(out, idx, g.data)
    else:
        out[idx] = g.data
    return _make(out, "scatter", (g,), (lambda h: getitem(h, idx),))


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def piece(i):
        sl = [slice(None)] * ts[0].ndim
        sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
        sl = tuple(sl)
        return lambda g: getitem(g, sl)

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concatenate", ts,
                 [piece(i) for i in range(len(ts))])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = []
    for t in ts:
        shp = list(t.shape)
        shp.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shp)))
    return concatenate(expanded, axis=axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * a.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g):
        return broadcast_to(reshape(g, kshape), src)

    return _make(out, "sum", (a,), (vjp,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 (lambda g: sum_to(g, sa), lambda g: sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 (lambda g: sum_to(g, sa), lambda g: sum_to(neg(g), sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), (lambda g: neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, "mul", (a, b),
                 (lambda g: sum_to(mul(g, b), sa), lambda g: sum_to(mul(g, a), sb)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _make(data, "div", (a, b),
                 (lambda g: sum_to(div(g, b), sa),
                  lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), sb)))


def square(a) -> Tensor:
    return mul(a, a)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 2:
        return mul(a, a)
    if p == 1:
        return a
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data ** p
    return _make(data, "pow", (a,), (lambda g: mul(g, mul(p, power(a, p - 1))),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def ga(g):
        return sum_to(matmul(g, b.swapaxes(-1, -2)), sa)

    def gb(g):
        return sum_to(matmul(a.swapaxes(-1, -2), g), sb)

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), (ga, gb))


# -- elementwise functions --------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _make(data, "exp", (a,), ())
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), (lambda g: div(g, a),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), "tanh", (a,), ())
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, 1.0 - mul(out, out)),)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    out = _make(data, "sqrt", (a,), ())
    if out.requires_grad:
        out._vjps = (lambda g: div(mul(g, 0.5), out),)
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), "sin", (a,), (lambda g: mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), "cos", (a,), (lambda g: neg(mul(g, sin(a))),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(special.expit(a.data), "sigmoid", (a,), ())
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, mul(out, 1.0 - out)),)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.logaddexp(0.0, x)
    return _make(data, "softplus", (a,), (lambda g: mul(g, sigmoid(a)),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), "abs", (a,), (lambda g: mul(g, sign),))


def maximum_const(a, c: float) -> Tensor:
    """max(a, c) for a constant c; the gradient is routed where a > c."""
    a = as_tensor(a)
    mask = Tensor((a.data > c).astype(np.float64))
    return _make(np.maximum(a.data, c), "maximum", (a,), (lambda g: mul(g, mask),))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.gammaln(a.data), "lgamma", (a,), (lambda g: mul(g, digamma(a)),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.digamma(a.data), "digamma", (a,), (lambda g: mul(g, _trigamma(a)),))


def _trigamma(a: Tensor) -> Tensor:
    return _make(special.polygamma(1, a.data), "trigamma", (a,),
                 (lambda g: mul(g, Tensor(special.polygamma(2, a.data))),))


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with a detached max shift."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = exp(a - Tensor(m))
    return log(tsum(shifted, axis=axis)) + Tensor(np.squeeze(m, axis=axis))


# -- differentiation -------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs, create_graph: bool = False, seed=None) -> list:
    """Gradient of ``output`` with respect to each tensor in ``inputs``.

    ``output`` must be a scalar unless ``seed`` (the cotangent) is given.
    Inputs that are not connected to ``output`` receive zeros. With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    _check_finite(output.data, f"{output.op} (output)")
    if output.order >= MAX_DEPTH:
        raise NestingDepthError(
            f"differentiation nested deeper than {MAX_DEPTH} levels is not supported")
    if seed is None:
        if output.size != 1:
            raise ValueError("grad needs a scalar output or an explicit seed")
        seed = np.ones(output.shape)
    seed_t = Tensor(np.asarray(seed, dtype=np.float64).reshape(output.shape),
                    order=output.order + 1 if create_graph else 0)

    wanted = {id(t) for t in inputs}
    found: dict = {}
    if output.requires_grad:
        grads = {id(output): seed_t}
        with _record_as(create_graph):
            for node in reversed(_toposort(output)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    found[id(node)] = g
                for parent, vjp in zip(node._parents, node._vjps):
                    if not parent.requires_grad:
                        continue
                    contrib = vjp(g)
                    prev = grads.get(id(parent))
                    grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    elif id(output) in wanted:
        found[id(output)] = seed_t

    results = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        else:
            _check_finite(g.data, "gradient")
            if not create_graph and g.requires_grad:
                g = Tensor(g.data)
        results.append(g)
    return results[0] if single else results


def grad_of_grad(loss: Tensor, params: Tensor) -> np.ndarray:
    """Gradient of a loss that already contains first derivatives.

    The inner derivatives (forces) must have been computed with
    ``create_graph=True``; this is the second, outer level.
    """
    return grad(loss, params).data


# -- parameters ---------------------------------------------------------------------

@dataclass
class ParamVector:
    """Flat parameter storage with a named segment layout."""

    values: np.ndarray
    layout: dict = field(default_factory=dict)  # name -> (offset, shape)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        covered = np.zeros(self.values.size, dtype=int)
        for name, (off, shp) in self.layout.items():
            n = int(np.prod(shp))
            covered[off:off + n] += 1
        if self.layout and not (covered == 1).all():
            raise ValueError("parameter layout segments must be disjoint and cover the vector")
        if not np.isfinite(self.values).all():
            raise NumericFailure("ParamVector", "non-finite parameter")

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple], values=None) -> "ParamVector":
        layout, off = {}, 0
        for name, shp in shapes:
            layout[name] = (off, tuple(shp))
            off += int(np.prod(shp))
        vals = np.zeros(off) if values is None else values
        return cls(vals, layout)

    def __len__(self):
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        off, shp = self.layout[name]
        return self.values[off:off + int(np.prod(shp))].reshape(shp)

    def set_segment(self, name: str, value) -> None:
        off, shp = self.layout[name]
        self.values[off:off + int(np.prod(shp))] = np.asarray(value, dtype=np.float64).ravel()

    def views(self, theta: Tensor) -> dict:
        """Differentiable per-segment views of a flat parameter tensor."""
        out = {}
        for name, (off, shp) in self.layout.items():
            n = int(np.prod(shp))
            out[name] = reshape(getitem(theta, slice(off, off + n)), shp)
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))
