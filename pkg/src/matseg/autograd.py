"""Reverse-mode automatic differentiation over numpy arrays.

Values are plain ``numpy.ndarray`` objects (NCHW, row-major). A
:class:`Variable` wraps one value together with its gradient and the
backward rule that produced it. Graphs are built eagerly by calling the
functions in this module (or the arithmetic operators on ``Variable``) and
differentiated with :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Tensor = np.ndarray

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Variable:
    """A node in the computation graph.

    Attributes:
        value: the forward value.
        grad: accumulated gradient (same shape as ``value``) or ``None``.
        requires_grad: whether gradients flow into this node.
        parents: upstream variables this node was computed from.
        op: name of the producing operation (``"leaf"`` for inputs).
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence["Variable"] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Variable(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Variable) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Variable) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Variable) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_variable(x, requires_grad: bool = False) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(np.asarray(x), requires_grad=requires_grad)


_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread, e.g. for inference."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise op (relu sign, maxpool winner) in this thread.

    Finite-difference checks use this to detect a perturbation that crosses a
    kink, where the one-sided derivatives differ and central differences are
    meaningless.
    """
    prev = getattr(_local, "branches", None)
    log: List[bytes] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def note_branch(pattern: Callable[[], np.ndarray]) -> None:
    """Append ``pattern()`` to the active branch log; free when nothing is recording."""
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.ascontiguousarray(pattern()).tobytes())


def make_node(value: np.ndarray, parents: Sequence[Variable], backward_fn: BackwardFn, op: str) -> Variable:
    """Create the output node of an op, recording the graph only if needed."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Variable(value, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Variable(value, op=op)


def _check_same_shape(op: str, a: Variable, b: Variable) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Variable, b: Variable) -> Variable:
    _check_same_shape("add", a, b)
    return make_node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Variable, b: Variable) -> Variable:
    _check_same_shape("sub", a, b)
    return make_node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Variable, b: Variable) -> Variable:
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return make_node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scalar_mul(a: Variable, c: float) -> Variable:
    c = float(c)
    return make_node(a.value * a.value.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scalar_mul")


def add_scalar(a: Variable, c: float) -> Variable:
    return make_node(a.value + a.value.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def sum(a: Variable) -> Variable:  # noqa: A001 - mirrors the op name
    shape, dtype = a.shape, a.dtype

    def backward_fn(g):
        return (np.full(shape, g.reshape(()), dtype=dtype),)

    return make_node(np.asarray(a.value.sum(), dtype=dtype), (a,), backward_fn, "sum")


def mean(a: Variable) -> Variable:
    shape, dtype, n = a.shape, a.dtype, a.value.size

    def backward_fn(g):
        return (np.full(shape, g.reshape(()) / n, dtype=dtype),)

    return make_node(np.asarray(a.value.mean(), dtype=dtype), (a,), backward_fn, "mean")


def square(a: Variable) -> Variable:
    av = a.value
    return make_node(av * av, (a,), lambda g: (g * (2 * av),), "square")


def relu(a: Variable) -> Variable:
    out = np.maximum(a.value, 0)
    note_branch(lambda: np.packbits(out > 0))
    return make_node(out, (a,), lambda g: (g * (out > 0),), "relu")


def flush_subnormals(a: np.ndarray, floor: Optional[float] = None) -> np.ndarray:
    """Zero entries below ``floor`` (default: smallest normal) in place.

    BLAS kernels slow down by an order of magnitude on subnormal operands.
    """
    if a.dtype.kind == "f":
        a[np.abs(a) < (np.finfo(a.dtype).tiny if floor is None else floor)] = 0
    return a


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function that never overflows ``exp``."""
    e = np.exp(-np.abs(x))
    one = x.dtype.type(1) if isinstance(x, np.ndarray) else 1.0
    return np.where(x >= 0, one / (one + e), e / (one + e))


def sigmoid(a: Variable) -> Variable:
    s = stable_sigmoid(a.value)
    return make_node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def reshape(a: Variable, shape: Sequence[int]) -> Variable:
    old = a.shape
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# channel ops (NCHW)
# ---------------------------------------------------------------------------

def concat_channels(a: Variable, b: Variable) -> Variable:
    """Concatenate two NCHW maps along the channel axis."""
    if a.value.ndim != 4 or b.value.ndim != 4:
        raise ShapeError(f"concat_channels: expected rank-4 operands, got {a.shape} and {b.shape}")
    (na, ca, ha, wa), (nb, cb, hb, wb) = a.shape, b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return make_node(np.concatenate([a.value, b.value], axis=1), (a, b), backward_fn, "concat_channels")


def slice_channels(a: Variable, stop: int, start: int = 0) -> Variable:
    """Channels ``start:stop`` of an NCHW map."""
    if a.value.ndim != 4:
        raise ShapeError(f"slice_channels: expected rank-4 operand, got {a.shape}")
    c = a.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: invalid range {start}:{stop} for {c} channels")
    shape, dtype = a.shape, a.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return make_node(a.value[:, start:stop], (a,), backward_fn, "slice_channels")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Variable) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable variable."""
    if loss.value.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool
    skipped: int = 0  # coordinates resampled because +-epsilon crossed a kink

    def as_dict(self) -> dict:
        return {
            "op": self.op_name,
            "max_relative_error": self.max_relative_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "skipped": self.skipped,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Variable],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    op_name: str = "f",
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``max_coords`` caps how many coordinates per input are perturbed (chosen
    with ``rng``); ``None`` checks every coordinate.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    variables = [Variable(x.copy(), requires_grad=True) for x in arrays]
    out = f(*variables)
    backward(out)
    worst = 0.0
    for k, x in enumerate(arrays):
        analytic = variables[k].grad
        if analytic is None:
            analytic = np.zeros_like(x)
        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(coords.size)
        with no_grad():
            for j, idx in enumerate(coords):
                orig = flat[idx]
                flat[idx] = orig + epsilon
                fp = float(f(*[Variable(a) for a in arrays]).value.reshape(()))
                flat[idx] = orig - epsilon
                fm = float(f(*[Variable(a) for a in arrays]).value.reshape(()))
                flat[idx] = orig
                numeric[j] = (fp - fm) / (2 * epsilon)
        err = relative_error(analytic.reshape(-1)[coords], numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return GradCheckReport(op_name, worst, tolerance, worst < tolerance)


def grad_check_params(
    loss_fn: Callable[[], Variable],
    named_params: Sequence,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    op_name: str = "model",
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Finite-difference check of d(loss)/d(param) for parameters held by a model.

    ``loss_fn`` recomputes the loss from the current parameter values, which
    are perturbed in place and restored afterwards. A parameter that ends up
    with no gradient counts as a failure.

    With ``skip_kinks`` a coordinate whose +-epsilon evaluations take a
    different relu/maxpool branch than the unperturbed loss is retried with
    epsilon/10 and epsilon/100, then replaced by another coordinate if it
    still straddles a kink (needs ``max_coords``). The number replaced is
    reported.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    if skip_kinks and max_coords is None:
        raise ContractError("skip_kinks needs max_coords so replacement coordinates can be drawn")
    rng = rng or np.random.default_rng(0)
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    with record_branches() as base:
        backward(loss_fn())

    def evaluate():
        with record_branches() as log:
            value = float(loss_fn().value.reshape(()))
        return value, log == base or not skip_kinks

    # kink-aware mode retries with smaller steps before giving up on a coordinate
    steps = (epsilon, epsilon / 10, epsilon / 100) if skip_kinks else (epsilon,)
    worst, skipped = 0.0, 0
    for name, p in named_params:
        if p.grad is None:
            return GradCheckReport(f"{op_name}:{name} (no gradient)", float("inf"), tolerance, False)
        if not p.value.flags.c_contiguous:
            p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        if max_coords is None or flat.size <= max_coords and not skip_kinks:
            queue = list(range(flat.size))
        else:
            queue = list(rng.permutation(flat.size))
        want = flat.size if max_coords is None else min(max_coords, flat.size)
        analytic, numeric = [], []
        with no_grad():
            while queue and len(numeric) < want:
                idx = queue.pop(0)
                orig = flat[idx]
                for eps in steps:
                    flat[idx] = orig + eps
                    fp, same_p = evaluate()
                    flat[idx] = orig - eps
                    fm, same_m = evaluate()
                    flat[idx] = orig
                    if same_p and same_m:
                        break
                else:
                    skipped += 1
                    continue
                analytic.append(grad[idx])
                numeric.append((fp - fm) / (2 * eps))
        if not numeric:
            return GradCheckReport(f"{op_name}:{name} (every coordinate sits on a kink)", float("inf"),
                                   tolerance, False, skipped)
        worst = max(worst, float(relative_error(np.array(analytic), np.array(numeric)).max()))
    return GradCheckReport(op_name, worst, tolerance, worst < tolerance, skipped)
