"""Dense float64 tensors with reverse-mode automatic differentiation.

Every network, loss, and gradient in the package runs on this engine. The
design is a classic tape: creating an op while a :class:`Graph` is active
appends a node (the output tensor itself) in creation order, which is a
topological order by construction. ``backward`` walks the tape once in
reverse, accumulating vector-Jacobian products into parent slots and finally
into the ``grad`` buffers of ``requires_grad`` leaves.

Rules kept deliberately strict so gradients stay auditable:

* Broadcasting is limited to (a) equal shapes, (b) one operand of size 1,
  (c) trailing-dimension broadcast (the smaller shape is a suffix of the
  larger). Anything else raises :class:`ShapeError`.
* With no active graph, ops run as plain numpy (evaluation mode) and outputs
  never require grad.
* Repeated ``backward`` calls accumulate into leaf ``grad`` buffers; callers
  reset with :func:`zero_grad`.
* Kinks: ``abs`` uses subgradient 0 at 0; the relu family uses the slope of
  the positive branch at 0; ``sqrt`` uses 0 at 0.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

Array = np.ndarray

_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = []
        _state.graphs = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Recording tape for one forward computation; confined to one thread."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _graph_stack().pop()
        if popped is not self:
            raise GraphError("graph contexts exited out of order")

    def __len__(self) -> int:
        return len(self.nodes)

    def backward_from(self, seeds: Sequence[tuple["Tensor", Array]]) -> None:
        """Backward pass seeded with explicit output cotangents.

        Visits each recorded node at most once, in reverse creation order.
        Leaf tensors with ``requires_grad`` accumulate into ``.grad``.
        """
        pending: dict[int, Array] = {}
        for t, g in seeds:
            if t._graph is not self:
                raise GraphError("seed tensor is not recorded on this graph")
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise ShapeError(f"seed gradient shape {g.shape} != tensor shape {t.data.shape}")
            key = t._node_id
            pending[key] = pending[key] + g if key in pending else g
        for node in reversed(self.nodes):
            g = pending.pop(node._node_id, None)
            if g is None:
                continue
            for parent, pg in node._vjp(g):
                if pg is None:
                    continue
                if parent._graph is self:
                    key = parent._node_id
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg


class Tensor:
    """Dense float64 array, optionally participating in reverse-mode AD.

    ``op`` is "leaf" for user-created tensors and the operation kind for
    recorded intermediates. ``grad`` is populated on ``requires_grad`` leaves
    by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "_graph", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._graph: Optional[Graph] = None
        self._node_id = -1

    # ---- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Tensor that never records or receives gradients."""
    return _lift(x)


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---- recording core --------------------------------------------------------


def _record(out_data: Array, op: str, parents: tuple, vjp: Callable) -> Tensor:
    g = active_graph()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.op = op
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._graph = g
        out._node_id = len(g.nodes)
        g.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._graph = None
        out._node_id = -1
    return out


def backward(loss: Tensor) -> None:
    """Seed d(loss)/d(loss)=1 and populate leaf gradients.

    Requires a scalar loss recorded on an active-or-finished graph. Repeated
    calls accumulate into leaf ``grad`` buffers.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._graph is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += np.ones_like(loss.data)
            return
        raise GraphError("loss is not recorded on any graph (was a Graph active?)")
    loss._graph.backward_from([(loss, np.ones_like(loss.data))])


# ---- broadcast handling ----------------------------------------------------


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    na = int(np.prod(sa)) if sa else 1
    nb = int(np.prod(sb)) if sb else 1
    if na == 1 or nb == 1:
        return sa if nb == 1 else sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible "
                     "(rule: equal, scalar, or trailing-dimension)")


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---- elementwise binary ops -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out = a.data + b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _record(out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out = a.data - b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _record(out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return ((a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape)))

    return _record(out, "mul", (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return ((a, _unbroadcast(g / bd, a.shape)),
                (b, _unbroadcast(-g * ad / (bd * bd), b.shape)))

    return _record(out, "div", (a, b), vjp)


# ---- elementwise unary ops ---------------------------------------------------


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, -g),)

    return _record(-a.data, "neg", (a,), vjp)


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow to non-finite value")

    def vjp(g):
        return ((a, g * out),)

    return _record(out, "exp", (a,), vjp)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return ((a, g / ad),)

    return _record(out, "log", (a,), vjp)


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)  # sign(0)=0: subgradient 0 at the kink

    def vjp(g):
        return ((a, g * sign),)

    return _record(out, "abs", (a,), vjp)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return ((a, g * (2.0 * ad)),)

    return _record(ad * ad, "square", (a,), vjp)


def tsqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires nonnegative input")
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return ((a, np.where(out > 0.0, g / (2.0 * safe), 0.0)),)

    return _record(out, "sqrt", (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data >= 0.0  # slope of the positive branch at the kink
    out = np.where(mask, a.data, slope * a.data)

    def vjp(g):
        return ((a, np.where(mask, g, slope * g)),)

    return _record(out, "leaky_relu", (a,), vjp)


def prelu(a: Tensor, alpha: Tensor) -> Tensor:
    """Parametric relu; ``alpha`` is a learnable scalar tensor."""
    if alpha.size != 1:
        raise ShapeError(f"prelu slope must be scalar, got shape {alpha.shape}")
    mask = a.data >= 0.0
    aval = float(alpha.data.reshape(-1)[0])
    out = np.where(mask, a.data, aval * a.data)
    ad = a.data

    def vjp(g):
        ga = np.where(mask, g, aval * g)
        galpha = np.sum(np.where(mask, 0.0, g * ad)).reshape(alpha.shape)
        return ((a, ga), (alpha, galpha))

    return _record(out, "prelu", (a, alpha), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return ((a, g * (1.0 - out * out)),)

    return _record(out, "tanh", (a,), vjp)


def tanh_deriv(a: Tensor) -> Tensor:
    """1 - tanh(x)^2 as a primitive, so Jacobian traces stay first-order differentiable."""
    th = np.tanh(a.data)
    out = 1.0 - th * th

    def vjp(g):
        return ((a, g * (-2.0 * th * out)),)

    return _record(out, "tanh_deriv", (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return ((a, g * out * (1.0 - out)),)

    return _record(out, "sigmoid", (a,), vjp)


def max_with_scalar(a: Tensor, c: float) -> Tensor:
    mask = a.data >= c  # positive-branch slope at the tie
    out = np.where(mask, a.data, c)

    def vjp(g):
        return ((a, np.where(mask, g, 0.0)),)

    return _record(out, "max_with_scalar", (a,), vjp)


def relu(a: Tensor) -> Tensor:
    return max_with_scalar(a, 0.0)


# ---- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return ((a, np.broadcast_to(g, shape).copy()),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis), shape).copy()),)

    return _record(out, "sum", (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, shape).copy()),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()),)

    return _record(out, "mean", (a,), vjp)


# ---- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return ((a, g @ bd.T), (b, ad.T @ g))

    return _record(out, "matmul", (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != layer in-width {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
    xd, wd = x.data, weight.data

    if bias is None:
        def vjp(g):
            return ((x, g @ wd), (weight, g.T @ xd))
        parents = (x, weight)
    else:
        def vjp(g):
            return ((x, g @ wd), (weight, g.T @ xd), (bias, g.sum(axis=0)))
        parents = (x, weight, bias)

    return _record(out, "linear", parents, vjp)


def rownorm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-d tensor; subgradient 0 at the origin kink."""
    if a.ndim != 2:
        raise ShapeError(f"rownorm expects a 2-d tensor, got {a.shape}")
    out = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))
    ad = a.data

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return ((a, ad * scale[:, None]),)

    return _record(out, "rownorm", (a,), vjp)


# ---- structural ops ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    if any(t.ndim != nd for t in tensors) or axis >= nd:
        raise ShapeError(f"concat axis {axis} invalid for shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * nd
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append((t, g[tuple(sl)]))
        return tuple(pieces)

    return _record(out, "concat", tensors, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (copying)."""
    if axis >= a.ndim or start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow({axis},{start},{length}) invalid for shape {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return ((a, full),)

    return _record(out, "narrow", (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return ((a, g.reshape(orig)),)

    return _record(out, "reshape", (a,), vjp)


_ELEMENTWISE_UNARY = {
    "neg": neg, "exp": texp, "log": tlog, "abs": tabs, "square": square,
    "sqrt": tsqrt, "tanh": tanh, "sigmoid": sigmoid, "tanh_deriv": tanh_deriv,
}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None, **kw) -> Tensor:
    """Dispatch by op kind; the catalog the rest of the package builds on."""
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} requires two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        return _ELEMENTWISE_UNARY[op_kind](a)
    if op_kind == "leaky_relu":
        return leaky_relu(a, kw.get("slope", 0.01))
    if op_kind == "prelu":
        return prelu(a, b)
    if op_kind == "max_with_scalar":
        return max_with_scalar(a, kw["c"])
    raise ShapeError(f"unknown elementwise op kind: {op_kind}")
