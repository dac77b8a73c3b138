"""
Tensor and Tape

A small reverse-mode differentiation engine over float64 numpy arrays.

Every differentiable operation appends one node to a flat, append-only tape
(`Graph`). Nodes are recorded in execution order, so the tape is already in
topological order and backward is a single reverse sweep. A tape lives for
one forward/backward pass and is never replayed.

Tapes are per thread. Inside `with Graph():` operations record onto that
graph; outside, they record onto a per-thread default graph that is cleared
after each backward. Inside `with no_grad():` nothing is recorded.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import DimensionError, DomainError, GraphError
from app.services.autodiff import special

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _thread_state() -> threading.local:
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = Graph()
        _local.no_grad_depth = 0
    return _local


def current_graph() -> "Graph":
    state = _thread_state()
    return state.stack[-1] if state.stack else state.default


def grad_enabled() -> bool:
    return _thread_state().no_grad_depth == 0


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block (this thread only)."""
    state = _thread_state()
    state.no_grad_depth += 1
    try:
        yield
    finally:
        state.no_grad_depth -= 1


@dataclass
class Node:
    """One tape entry: op kind, operands, result and its backward closure.

    The closure holds whatever forward values the op saved.
    """
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


class Graph:
    """Append-only tape of nodes in execution order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _thread_state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _thread_state().stack.pop()
        if popped is not self:
            raise GraphError("Graph contexts exited out of order")

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
               backward: BackwardFn) -> None:
        for t in inputs:
            if t._graph is not None and t._graph is not self:
                raise GraphError(
                    f"{op}: operand was recorded on a different graph "
                    "(tensors from an earlier forward pass cannot be reused)"
                )
        output._graph = self
        output._position = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward))

    def backward(self, output: "Tensor", seed: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from `output` to every tensor that requires them.

        Leaf gradients accumulate into `.grad`; call `zero_grad` between steps.
        """
        if output._graph is not self:
            raise GraphError("backward called with a tensor recorded on another graph")
        seed = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
        output.grad = seed.copy()

        for node in reversed(self.nodes[: output._position + 1]):
            g = node.output.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.data.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi

        if self is _thread_state().default:
            _thread_state().default = Graph()

    def __len__(self) -> int:
        return len(self.nodes)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: "Tensor", b: "Tensor") -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def lift(x: ArrayLike) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, data: np.ndarray, inputs: Sequence["Tensor"],
             backward: BackwardFn) -> "Tensor":
    """Wrap a forward result and record it when any operand needs gradients."""
    out = Tensor(data)
    inputs = tuple(inputs)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(op, inputs, out, backward)
    return out


class Tensor:
    """A float64 array with optional gradient tracking.

    Attributes:
        data: The values (contiguous, row-major)
        requires_grad: Whether backward should produce `grad`
        grad: Accumulated gradient, same shape as `data`, or None
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._graph: Optional[Graph] = None
        self._position = -1

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        if self._graph is None:
            if not self.requires_grad:
                raise GraphError("backward on a tensor that does not require grad")
            g = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
            self.grad = g if self.grad is None else self.grad + g
            return
        self._graph.backward(self, seed)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # Arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    # ------------------------------------------------------------------
    # Method forms
    # ------------------------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def lgamma(self) -> "Tensor":
        return lgamma(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return clamp(self, lo, hi)

    def gather(self, indices, axis: Optional[int] = None) -> "Tensor":
        return gather(self, indices, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


# =============================================================================
# Binary ops
# =============================================================================


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("add", a, b)
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: zero in denominator")
    out = ad / bd
    return apply_op("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return apply_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# =============================================================================
# Unary ops
# =============================================================================


def neg(x: ArrayLike) -> Tensor:
    x = lift(x)
    return apply_op("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: ArrayLike) -> Tensor:
    x = lift(x)
    out = np.exp(x.data)
    return apply_op("exp", out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = lift(x)
    xd = x.data
    if np.any(~(xd > 0.0)):
        raise DomainError("log: requires x > 0 (clamp first)")
    return apply_op("log", np.log(xd), (x,), lambda g: (g / xd,))


def _stable_sigmoid(xd: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: ArrayLike) -> Tensor:
    x = lift(x)
    out = _stable_sigmoid(x.data)
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: ArrayLike) -> Tensor:
    """ln(1 + e^x); linear above 30 and exponential below -30."""
    x = lift(x)
    xd = x.data
    out = np.log1p(np.exp(np.clip(xd, -30.0, 30.0)))
    high, low = xd > 30.0, xd < -30.0
    out[high] = xd[high]
    out[low] = np.exp(xd[low])
    slope = _stable_sigmoid(xd)
    return apply_op("softplus", out, (x,), lambda g: (g * slope,))


def lgamma(x: ArrayLike) -> Tensor:
    x = lift(x)
    xd = x.data
    out = special.lgamma(xd)
    return apply_op("lgamma", out, (x,), lambda g: (g * special.digamma(xd),))


def relu(x: ArrayLike) -> Tensor:
    x = lift(x)
    active = x.data > 0.0
    return apply_op("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def clamp(x: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero outside the open interval."""
    x = lift(x)
    inside = (x.data > lo) & (x.data < hi)
    return apply_op("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (x,), backward)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (x,), backward)


# =============================================================================
# Reductions and indexing
# =============================================================================


def sum_(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = lift(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return apply_op("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = lift(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError("mean of an empty tensor")
    return sum_(x, axis, keepdims) * (1.0 / count)


def gather(x: ArrayLike, indices, axis: Optional[int] = None) -> Tensor:
    """Select entries by integer index; flat when `axis` is None.

    Indices carry no gradient; repeated indices accumulate.
    """
    x = lift(x)
    idx = np.asarray(indices, dtype=np.int64)
    extent = x.size if axis is None else x.shape[axis]
    if idx.size and (idx.min() < -extent or idx.max() >= extent):
        raise DimensionError(f"gather: index out of range for extent {extent}")
    shape = x.shape

    if axis is None:
        out = x.data.reshape(-1)[idx]

        def backward(g):
            flat = np.bincount(idx.reshape(-1) % extent, weights=g.reshape(-1), minlength=extent)
            return (flat.reshape(shape),)
    else:
        out = np.take(x.data, idx, axis=axis)

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
            return (full,)

    return apply_op("gather", out, (x,), backward)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = lift(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from None
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(original),))


def transpose(x: ArrayLike) -> Tensor:
    x = lift(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return apply_op("transpose", np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))
