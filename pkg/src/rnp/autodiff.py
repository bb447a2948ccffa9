"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  Nodes
carry a monotonically increasing sequence number, so sorting the ancestors of a
loss by that number reproduces the order in which they were recorded; that
ordering is the computation tape.  The tape is rebuilt on every forward pass.

Broadcasting is deliberately absent: binary operations require equal shapes.
The only exceptions are multiplication/addition by a Python scalar
(:func:`scale`, :func:`shift`) and the explicit row tiling in :func:`tile_rows`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor_from",
    "constant",
    "parameter",
    "matmul",
    "transpose",
    "elementwise",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "square",
    "scale",
    "shift",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "slice_",
    "reshape",
    "tile_rows",
    "weighted_sum",
    "tie",
    "backward",
    "tape_of",
    "zero_grad",
    "no_grad",
    "debug_checks",
    "grad_check",
    "GradCheckReport",
]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up while debug checks are active."""


_ids = itertools.count()
_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block; results are plain constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Check every op output (and every backward gradient) for NaN/Inf."""
    global _debug
    prev = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = prev


class Tensor:
    """Shape-tagged float64 array taking part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(t) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(t)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def tensor_from(values, shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major sequence of numbers."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape dimensions must be positive, got {shape}")
    if math.prod(shape) != flat.size:
        raise ValueError(f"shape {shape} holds {math.prod(shape)} values, got {flat.size}")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def constant(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64))


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[m, k]`` and ``[k, n]`` tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def _bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), _bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def _bw(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _make(out, (a,), _bw)


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


_UNARY: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "square": square,
}
_BINARY: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand, got {len(args)}")
        return _UNARY[op](_as_tensor(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands, got {len(args)}")
        return _BINARY[op](_as_tensor(args[0]), _as_tensor(args[1]))
    raise ValueError(f"unknown elementwise op {op!r}")


# --- reductions and shape plumbing ----------------------------------------


def _check_axis(t: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    nd = t.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"axis {axis} out of range for shape {t.shape}")
    return axis % nd


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_axis(t, axis)
    shape = t.shape

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(t.data, axis=axis), (t,), _bw)


def reduce_mean(t: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_axis(t, axis)
    n = t.size if axis is None else t.shape[axis]
    shape = t.shape

    def _bw(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(np.mean(t.data, axis=axis), (t,), _bw)


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ValueError(f"unknown reduction {op!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"axis {axis} out of range for rank {nd}")
    axis %= nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(
            t.shape[d] != tensors[0].shape[d] for d in range(nd) if d != axis
        ):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def slice_(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Half-open slice ``[start, stop)`` along ``axis``."""
    axis = _check_axis(t, axis)
    n = t.shape[axis]
    if not 0 <= start < stop <= n:
        raise ValueError(f"slice [{start}, {stop}) out of range for axis of length {n}")
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = t.shape

    def _bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(t.data[index].copy(), (t,), _bw)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    return _make(t.data.reshape(tuple(shape)), (t,), lambda g: (g.reshape(old),))


def tile_rows(t: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a 1-D tensor into an ``[n, d]`` matrix."""
    if t.data.ndim != 1:
        raise ValueError(f"tile_rows expects a 1-D tensor, got {t.shape}")
    if n <= 0:
        raise ValueError("tile_rows needs n >= 1")
    return _make(np.tile(t.data, (n, 1)), (t,), lambda g: (g.sum(axis=0),))


def weighted_sum(tensors: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum_i weights[i] * tensors[i]`` accumulated strictly in list order.

    Callers that need bitwise reproducibility fix the list order themselves.
    """
    if not tensors or len(tensors) != len(weights):
        raise ValueError("weighted_sum needs equally many (>= 1) tensors and weights")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "weighted_sum")
    ws = [float(w) for w in weights]
    acc = tensors[0].data * ws[0]
    for t, w in zip(tensors[1:], ws[1:]):
        acc = acc + t.data * w

    def _bw(g):
        return tuple(g * w for w in ws)

    return _make(acc, tuple(tensors), _bw)


def tie(members: Sequence[Tensor]) -> Tensor:
    """Value of ``members[0]`` with the gradient split evenly over all members.

    Meant for tensors known to hold identical values (for instance the same
    input encoded twice): the mean of such a group equals its first member
    exactly, while every member still receives its share of the gradient.
    """
    members = list(members)
    if len(members) == 1:
        return members[0]
    m = len(members)
    return _make(members[0].data.copy(), tuple(members), lambda g: tuple(g / m for _ in range(m)))


# --- backward pass ---------------------------------------------------------


def tape_of(loss: Tensor) -> list[Tensor]:
    """Grad-requiring ancestors of ``loss`` in recording order (inputs first)."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._id)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Intermediate nodes receive their gradient in ``.grad`` as well (overwritten,
    not accumulated).  Leaf gradients add up across calls; use :func:`zero_grad`
    between optimisation steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = tape_of(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if _debug and not np.all(np.isfinite(pg)):
                raise NonFiniteError("non-finite gradient in backward pass")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error of analytic vs central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    rel_tol: float = 1e-4
    eps: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.rel_tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        op = "<" if self.passed else ">="
        return f"{verdict} rel_err{op}{_sci(self.rel_tol)} (max {self.max_error:.3e}, eps {_sci(self.eps)})"


def _sci(x: float) -> str:
    """Compact scientific notation: 1e-3, 2.5e-4."""
    mant, exp = f"{x:.6e}".split("e")
    return f"{mant.rstrip('0').rstrip('.')}e{int(exp)}"


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-6,
    grad_offset: float = 0.0,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call and be deterministic.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, abs_floor)``.  ``grad_offset`` is added to every
    analytic gradient; it exists to verify that the check can fail.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = params if isinstance(params, dict) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)
    }
    zero_grad(named.values())
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("function value is not finite")
    backward(loss)
    report = GradCheckReport(rel_tol=rel_tol, eps=eps)
    for name, p in named.items():
        analytic = p.grad + grad_offset
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value while perturbing {name}")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, abs(a - numeric) / denom)
        report.errors[name] = worst
    return report
