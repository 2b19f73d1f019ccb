"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` linked to a
:class:`Node` of the recording tape.  Nodes carry a monotonically increasing
sequence number, so sorting the nodes reachable from a loss by that number
gives a valid topological order without any explicit graph traversal order
bookkeeping.  :func:`backward` walks that order in reverse exactly once and
then marks the nodes consumed; differentiating the same graph a second time
raises :class:`~mtcnet.errors.TapeError`.

Gradients accumulate into ``Tensor.grad`` and are never cleared implicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_node_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextlib.contextmanager
def record_decisions():
    """Collect the discrete choices (ReLU masks, pooling argmaxes) made by ops
    inside the block.  Two evaluations with equal logs lie on the same smooth
    piece of a piecewise-smooth function."""
    log = []
    previous = getattr(_state, "decisions", None)
    _state.decisions = log
    try:
        yield log
    finally:
        _state.decisions = previous


def note_decision(arr):
    log = getattr(_state, "decisions", None)
    if log is not None:
        log.append(np.array(arr, copy=True))


def _same_decisions(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class Node:
    """One recorded operation: the inputs, a weak link to the output, and the
    rule mapping the output gradient to one gradient per input."""

    __slots__ = ("id", "op", "inputs", "_output", "backward_fn", "consumed")

    def __init__(self, op, inputs, output, backward_fn):
        self.id = next(_node_counter)
        self.op = op
        self.inputs = tuple(inputs)
        self._output = weakref.ref(output)
        self.backward_fn = backward_fn
        self.consumed = False

    @property
    def output(self):
        return self._output()

    def __repr__(self):
        return f"Node({self.op}, id={self.id})"


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``shape`` may be ``()`` for scalars.  Data is stored as a C-contiguous
    numpy array; ``grad`` (when present) has the same shape.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value, dtype=np.float64))


def ones_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.ones_like(t.data))


def forward_record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                   backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` as the result of ``op`` and append a tape node when
    any input requires a gradient.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per input, in input order.
    """
    out = Tensor._wrap(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, out, backward_fn)
    return out


def _collect(root: Node):
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            parent = t._node
            if parent is not None and parent.id not in seen:
                seen[parent.id] = parent
                stack.append(parent)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


@dataclass
class Tape:
    """Ordered view of the nodes that produced a tensor (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def of(cls, t: Tensor) -> "Tape":
        if t._node is None:
            return cls([])
        return cls(list(reversed(_collect(t._node))))


def _accumulate(t: Tensor, g: np.ndarray):
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss has no recorded operations; nothing to differentiate")
    if loss._node.consumed:
        raise TapeError("graph already differentiated; re-run the forward pass")
    order = _collect(loss._node)
    if any(node.consumed for node in order):
        raise TapeError("graph shares nodes with an already differentiated graph")

    pending = {loss._node.id: np.ones(loss.shape)}
    for node in order:
        g_out = pending.pop(node.id, None)
        out = node.output
        if g_out is None:
            # node feeds the loss only through non-differentiable paths
            node.consumed = True
            continue
        if out is not None:
            _accumulate(out, g_out)
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = t._node.id
                if key in pending:
                    pending[key] = pending[key] + g.reshape(t.shape)
                else:
                    pending[key] = g.reshape(t.shape)
            else:
                _accumulate(t, g)
        node.consumed = True
        node.backward_fn = None


# -- elementwise arithmetic ---------------------------------------------------

def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, t):
    if t.size == 1 and g.size != 1:
        return np.asarray(g.sum()).reshape(t.shape)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def grad_fn(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return forward_record("add", (a, b), a.data + b.data, grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def grad_fn(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return forward_record("sub", (a, b), a.data - b.data, grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return forward_record("mul", (a, b), ad * bd, grad_fn)


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape),)

    return forward_record("sum", (a,), np.asarray(a.data.sum()), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc

    def grad_fn(g):
        return (g.reshape(src),)

    return forward_record("reshape", (a,), out, grad_fn)


# -- finite differences -------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    indices: np.ndarray
    tol: float
    max_error: float
    passed: bool
    kinked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        extra = f", {len(self.kinked)} kink-crossing probes skipped" if len(self.kinked) else ""
        return (f"grad_check {verdict}: max error {self.max_error:.3e} over "
                f"{len(self.indices)} coordinates (tol {self.tol:g}){extra}")


def relative_errors(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-5, tol=1e-4,
               indices=None, skip_kinks=False, max_coords=None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``indices`` selects flat coordinates to probe (all of them by default).
    Errors are relative, falling back to absolute when both gradients are
    below 1e-8 in magnitude.  With ``skip_kinks`` a probe whose +/-eps
    evaluations change any ReLU or pooling decision is set aside in
    ``kinked`` (the difference quotient straddles a kink there) and the next
    candidate is used; ``max_coords`` caps the number of smooth probes.
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs an input with requires_grad=True")
    x.grad = None
    with record_decisions() as base:
        out = f(x)
    backward(out)
    analytic_full = x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    candidates = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    checked, numeric, kinked = [], [], []
    with no_grad():
        for i in candidates:
            if max_coords is not None and len(checked) >= max_coords:
                break
            orig = flat[i]
            flat[i] = orig + eps
            with record_decisions() as plus:
                f_plus = f(x).item()
            flat[i] = orig - eps
            with record_decisions() as minus:
                f_minus = f(x).item()
            flat[i] = orig
            if skip_kinks and not (_same_decisions(base, plus) and _same_decisions(base, minus)):
                kinked.append(i)
                continue
            checked.append(i)
            numeric.append((f_plus - f_minus) / (2.0 * eps))
    idx = np.asarray(checked, dtype=np.int64)
    analytic = analytic_full[idx]
    numeric = np.asarray(numeric, dtype=np.float64)
    errors = relative_errors(analytic, numeric)
    max_error = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(analytic, numeric, errors, idx, tol, max_error, max_error < tol,
                           np.asarray(kinked, dtype=np.int64))
