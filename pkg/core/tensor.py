"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable operation records its parents and a backward closure at
forward time.  ``backward(loss)`` sorts the recorded graph once and walks it in
reverse, accumulating gradients additively wherever a tensor fans out.

Shapes follow a deliberately narrow broadcasting rule: binary elementwise ops
accept operands of identical shape, a scalar, or a vector matching the last
axis.  Anything else is a ``DimensionError``.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError, ParameterError

Number = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Sequence, Number]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()
_instrumentation_enabled = True


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise ContractError(f"{what} produced non-finite values")


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data._value
        value = np.array(data, dtype=np.float64, order="C")
        _check_finite(value, name or "tensor")
        self._value = value
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, value: np.ndarray, parents: Sequence["Tensor"],
                 backward: BackwardFn, op: str) -> "Tensor":
        value = np.ascontiguousarray(value, dtype=np.float64)
        _check_finite(value, op)
        out = cls.__new__(cls)
        out._value = value
        out.grad = None
        out.name = None
        out._op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # --- storage ---
    @property
    def shape(self) -> List[int]:
        return list(self._value.shape)

    @property
    def ndim(self) -> int:
        return self._value.ndim

    @property
    def size(self) -> int:
        return int(self._value.size)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self._value.reshape(-1)

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._value.reshape(-1)[0])

    def assign(self, new_value: np.ndarray) -> None:
        """Overwrite values in place (optimizer updates, checkpoint loads)."""
        new_value = np.asarray(new_value, dtype=np.float64)
        if list(new_value.shape) != self.shape:
            raise DimensionError("assign", self.shape, new_value.shape)
        _check_finite(new_value, self.name or "assign")
        self._value[...] = new_value

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    # --- operators ---
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

    def __truediv__(self, other: Number) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: Number) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(data, requires_grad=True, name=name)


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Record a fused operation whose backward pass is supplied by the caller.

    ``backward_fn`` receives the upstream gradient and returns one gradient (or
    None) per parent, in order.
    """
    return Tensor._from_op(value, parents, backward_fn, op)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- grad mode ---

def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# --- instrumentation ---

@dataclass
class MacCounter:
    """Per-run accumulator of multiply-accumulates and elementwise work."""

    matmul: Dict[str, int] = field(default_factory=dict)
    elementwise: Dict[str, int] = field(default_factory=dict)
    scope: str = "other"

    def add_matmul(self, macs: int) -> None:
        self.matmul[self.scope] = self.matmul.get(self.scope, 0) + int(macs)

    def add_elementwise(self, kind: str, count: int) -> None:
        self.elementwise[kind] = self.elementwise.get(kind, 0) + int(count)

    @property
    def total_matmul(self) -> int:
        return sum(self.matmul.values())

    @property
    def total_elementwise(self) -> int:
        return sum(self.elementwise.values())


def set_instrumentation(enabled: bool) -> None:
    global _instrumentation_enabled
    _instrumentation_enabled = bool(enabled)


def instrumentation_enabled() -> bool:
    return _instrumentation_enabled


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    if not _instrumentation_enabled:
        raise ContractError("MAC instrumentation is disabled")
    previous = getattr(_state, "counter", None)
    counter = MacCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = previous


@contextmanager
def mac_scope(name: str) -> Iterator[None]:
    counter: Optional[MacCounter] = getattr(_state, "counter", None)
    if counter is None:
        yield
        return
    previous = counter.scope
    counter.scope = name
    try:
        yield
    finally:
        counter.scope = previous


def record_elementwise(kind: str, count: int) -> None:
    counter: Optional[MacCounter] = getattr(_state, "counter", None)
    if counter is not None:
        counter.add_elementwise(kind, count)


def _record_matmul(macs: int) -> None:
    counter: Optional[MacCounter] = getattr(_state, "counter", None)
    if counter is not None:
        counter.add_matmul(macs)


class KinkMonitor:
    """Closest approach of any recorded pre-activation to a non-differentiable point."""

    def __init__(self):
        self.min_distance = math.inf
        self.observed = 0

    def note(self, values: np.ndarray, kinks: Sequence[float]) -> None:
        if values.size == 0:
            return
        self.observed += int(values.size)
        for kink in kinks:
            self.min_distance = min(self.min_distance, float(np.min(np.abs(values - kink))))


@contextmanager
def track_kinks() -> Iterator[KinkMonitor]:
    previous = getattr(_state, "kinks", None)
    monitor = KinkMonitor()
    _state.kinks = monitor
    try:
        yield monitor
    finally:
        _state.kinks = previous


def kinks_tracked() -> bool:
    return getattr(_state, "kinks", None) is not None


def note_kinks(values: np.ndarray, kinks: Sequence[float]) -> None:
    monitor: Optional[KinkMonitor] = getattr(_state, "kinks", None)
    if monitor is not None:
        monitor.note(values, kinks)


# --- graph ---

class Graph:
    """Tensors reachable from a root through recorded operations, parents first."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> Graph:
    """Populate ``grad`` on every leaf that requires it with dLoss/dLeaf."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    graph = Graph(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss._value)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent._value.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return graph


# --- elementwise ---

def _pair_kind(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...], op: str) -> str:
    if a_shape == b_shape:
        return "same"
    if len(b_shape) == 0 or b_shape == (1,):
        return "scalar_b"
    if len(a_shape) == 0 or a_shape == (1,):
        return "scalar_a"
    if len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]:
        return "last_b"
    if len(a_shape) == 1 and len(b_shape) >= 1 and b_shape[-1] == a_shape[0]:
        return "last_a"
    raise DimensionError(op, a_shape, b_shape)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _binary(a: ArrayLike, b: ArrayLike, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a._value, b._value
    _pair_kind(av.shape, bv.shape, op)
    if op == "add":
        out = av + bv
    elif op == "sub":
        out = av - bv
    else:
        out = av * bv

    def backward_fn(g):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * bv, g * av
        return _reduce_to(ga, av.shape), _reduce_to(gb, bv.shape)

    return Tensor._from_op(out, (a, b), backward_fn, op)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a._value, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: Number) -> Tensor:
    av = a._value
    out = av ** exponent
    return Tensor._from_op(out, (a,), lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a._value)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a._value)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def absolute(a: Tensor) -> Tensor:
    """|a| with derivative sign(a); sign(0) is taken as 0."""
    av = a._value
    note_kinks(av, (0.0,))
    return Tensor._from_op(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def relu(a: Tensor) -> Tensor:
    av = a._value
    note_kinks(av, (0.0,))
    return Tensor._from_op(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),), "relu")


def relu6(x: Tensor) -> Tensor:
    """min(6, max(0, x)); gradient passes only strictly inside (0, 6)."""
    xv = x._value
    note_kinks(xv, (0.0, 6.0))
    inside = (xv > 0.0) & (xv < 6.0)
    return Tensor._from_op(np.clip(xv, 0.0, 6.0), (x,), lambda g: (g * inside,), "relu6")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a._value.shape) >= p) / (1.0 - p)
    return Tensor._from_op(a._value * mask, (a,), lambda g: (g * mask,), "dropout")


# --- shape ---

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a._value.shape
    out = a._value.reshape(tuple(shape))
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(original),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a._value, axes)
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inverse),), "permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose", a.shape)
    return Tensor._from_op(np.swapaxes(a._value, -1, -2), (a,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    shape = a._value.shape
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        grad = np.zeros(shape)
        grad[index] = g
        return (grad,)

    return Tensor._from_op(a._value[index], (a,), backward_fn, "slice")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; every other extent must agree."""
    if not parts:
        raise ParameterError("concat needs at least one tensor")
    values = [p._value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise DimensionError("concat", *[v.shape for v in values]) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return Tensor._from_op(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def broadcast_batch(a: Tensor, batch: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of extent ``batch``."""
    out = np.broadcast_to(a._value, (batch,) + a._value.shape).copy()
    return Tensor._from_op(out, (a,), lambda g: (g.sum(axis=0),), "broadcast_batch")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with gradients scattered back by row."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table._value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ParameterError(f"gather_rows: ids must lie in [0, {rows})")
    out = table._value[ids]

    def backward_fn(g):
        grad = np.zeros_like(table._value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table._value.shape[1]))
        return (grad,)

    return Tensor._from_op(out, (table,), backward_fn, "gather_rows")


# --- reductions ---

def sum_all(a: Tensor) -> Tensor:
    shape = a._value.shape
    return Tensor._from_op(np.asarray(a._value.sum()), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = a._value.shape
    n = shape[axis]
    out = a._value.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return Tensor._from_op(out, (a,), backward_fn, "mean")


# --- linear algebra and normalisation ---

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or carries exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a._value, b._value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError("matmul", av.shape, bv.shape)
    if bv.ndim > 2 and bv.shape[:-2] != av.shape[:-2]:
        raise DimensionError("matmul", av.shape, bv.shape)
    k, n = bv.shape[-2], bv.shape[-1]
    _record_matmul((av.size // k) * k * n)
    out = av @ bv

    def backward_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), backward_fn, "matmul")


def softmax_rows(m: Tensor) -> Tensor:
    """Exp-normalise along the last axis, with max subtraction."""
    mv = m._value
    if mv.ndim == 0 or mv.shape[-1] < 1:
        raise DimensionError("softmax_rows", mv.shape)
    shifted = mv - mv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    record_elementwise("softmax", mv.size)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (m,), backward_fn, "softmax_rows")


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise along the last axis, then apply gain and bias."""
    x = v._value
    width = x.shape[-1] if x.ndim else 0
    if width < 2:
        raise ParameterError(f"layer_norm needs at least 2 features, got shape {list(x.shape)}")
    if gain.shape != [width] or bias.shape != [width]:
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    gv, bv = gain._value, bias._value
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    record_elementwise("layer_norm", x.size)

    def backward_fn(g):
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, width).sum(axis=0)
        dbias = g.reshape(-1, width).sum(axis=0)
        return dx, dgain, dbias

    return Tensor._from_op(xhat * gv + bv, (v, gain, bias), backward_fn, "layer_norm")


# --- gradient checking ---

@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: str

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                   step: float = 1e-5, floor: float = 1e-3) -> GradCheckResult:
    """Compare backward() against central differences for every parameter entry.

    The relative error of one entry is |analytic - numeric| / max(|analytic|,
    |numeric|, floor).
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]

    worst_rel, worst_abs, worst_name, checked = 0.0, 0.0, "", 0
    with no_grad():
        for index, (p, grad) in enumerate(zip(params, analytic)):
            flat = p.value.reshape(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                f_plus = fn().item()
                flat[i] = original - step
                f_minus = fn().item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                diff = abs(flat_grad[i] - numeric)
                rel = diff / max(abs(flat_grad[i]), abs(numeric), floor)
                checked += 1
                if rel > worst_rel:
                    worst_rel = rel
                    worst_name = f"{p.name or f'param{index}'}[{i}]"
                worst_abs = max(worst_abs, diff)
    return GradCheckResult(worst_rel, worst_abs, checked, worst_name)
