"""Minimal deterministic reverse-mode autodiff over dense float64 tensors.

Design points:

* Define-by-run: every traced operation appends one node to the active
  :class:`Tape`.  A fresh tape is installed per training step with
  :func:`new_tape`; tensors produced under an older tape are treated as
  constants afterwards.
* Broadcasting is restricted to scalar-vs-tensor and equal shapes.  Anything
  richer (bias rows, windowing) goes through explicit structural ops
  (:func:`repeat_rows`, :func:`concat`, :func:`slice_axis`, ...) so shape bugs
  fail loudly.
* float64 everywhere.  The covariance regularizer squares already-squared
  quantities and 32-bit precision is not enough to pass finite-difference
  checks.
* Backward is a reverse sweep over the tape's node list, so gradient
  accumulation order is fixed and two backward calls over the same tape are
  bitwise identical.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "EmptyReductionError",
    "GradientError",
    "tensor",
    "as_tensor",
    "new_tape",
    "active_tape",
    "set_debug_checks",
    "debug_checks_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "square",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "backward",
    "detach",
    "reshape",
    "permute",
    "concat",
    "slice_axis",
    "gather_rows",
    "repeat_rows",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ArithmeticError):
    """An operation left (or would leave) the finite-real domain."""


class EmptyReductionError(ValueError):
    """Mean over zero elements was requested."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, detached loss...)."""


_DEBUG_CHECKS = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle the post-op finite check (on by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class _TapeNode:
    """One recorded operation: kind, operand node ids, per-operand grad fns."""

    __slots__ = ("op", "input_ids", "grad_fns", "out_id")

    def __init__(self, op, input_ids, grad_fns, out_id):
        self.op = op
        self.input_ids = input_ids
        self.grad_fns = grad_fns
        self.out_id = out_id


class Tape:
    """Append-only record of traced operations.

    ``nodes`` is in execution order, which for define-by-run construction is
    already a topological order of the DAG.  ``gradients`` maps node id to the
    accumulated gradient tensor after :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self.gradients: dict[int, "Tensor"] = {}

    def _register_leaf(self, t: "Tensor") -> int:
        node_id = len(self.nodes)
        self.nodes.append(_TapeNode("leaf", (), (), node_id))
        t._tape = self
        t._node_id = node_id
        return node_id

    def _record(self, op: str, tracked, grad_fns, out: "Tensor") -> None:
        node_id = len(self.nodes)
        input_ids = tuple(t._node_id for t in tracked)
        self.nodes.append(_TapeNode(op, input_ids, tuple(grad_fns), node_id))
        out._tape = self
        out._node_id = node_id


_ACTIVE_TAPE = Tape()


def new_tape() -> Tape:
    """Install and return a fresh active tape (call once per training step)."""
    global _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    return _ACTIVE_TAPE


def active_tape() -> Tape:
    return _ACTIVE_TAPE


class Tensor:
    """Dense row-major float64 value, optionally participating in the tape.

    ``requires_grad`` marks user-created leaves whose gradients should be
    collected.  Intermediates are tracked through their tape node instead.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        if _DEBUG_CHECKS and arr.size and not np.all(np.isfinite(arr)):
            raise DomainError("tensor construction received non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return self._node_id

    @property
    def grad(self) -> "Tensor | None":
        """Gradient recorded for this tensor by the last backward sweep."""
        if self._tape is None or self._node_id is None:
            return None
        return self._tape.gradients.get(self._node_id)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are wrapped to 0-d constants.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Construct a leaf tensor."""
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tracked_on_active(t: Tensor) -> bool:
    if t.requires_grad:
        return True
    return t._tape is _ACTIVE_TAPE and t._node_id is not None


def _finish(op: str, out_data: np.ndarray, pairs) -> Tensor:
    """Wrap an op result; record a tape node when any operand is tracked.

    ``pairs`` is a sequence of (input tensor, grad_fn) where grad_fn maps the
    output gradient to that input's gradient contribution.
    """
    if _DEBUG_CHECKS and out_data.size and not np.all(np.isfinite(out_data)):
        raise DomainError(f"operation '{op}' produced non-finite values")
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    tracked = [(t, fn) for t, fn in pairs if _tracked_on_active(t)]
    if not tracked:
        return out
    for t, _ in tracked:
        if t._tape is not tape or t._node_id is None:
            tape._register_leaf(t)
    tape._record(op, [t for t, _ in tracked], [fn for _, fn in tracked], out)
    return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns the node-id gradient map.

    The sweep walks the tape's node list in reverse execution order, so the
    accumulation order is deterministic.  Gradients from a previous call on
    the same tape are discarded, not accumulated.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node_id is None:
        raise GradientError("loss tensor is not connected to a tape")
    grads: dict[int, np.ndarray] = {loss._node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for input_id, grad_fn in zip(node.input_ids, node.grad_fns):
            contribution = grad_fn(g)
            held = grads.get(input_id)
            grads[input_id] = contribution if held is None else held + contribution
    tape.gradients = {nid: Tensor(arr) for nid, arr in grads.items()}
    return tape.gradients


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _finish(
        "matmul",
        out,
        ((a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)),
    )


# ---------------------------------------------------------------------------
# elementwise ops (scalar or equal-shape broadcasting only)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op} supports equal shapes or a scalar operand, got {a.shape} and {b.shape}")


def _unbroadcast(t: Tensor):
    """Grad reducer for the scalar side of a scalar-vs-tensor op."""
    if t.data.ndim == 0:
        return lambda g: np.asarray(g.sum())
    return lambda g: g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    ra, rb = _unbroadcast(a), _unbroadcast(b)
    return _finish("add", a.data + b.data, ((a, ra), (b, rb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    ra, rb = _unbroadcast(a), _unbroadcast(b)
    return _finish("sub", a.data - b.data, ((a, ra), (b, lambda g: -rb(g))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = _unbroadcast(a), _unbroadcast(b)
    return _finish(
        "mul",
        ad * bd,
        ((a, lambda g: ra(g * bd)), (b, lambda g: rb(g * ad))),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _finish("square", xd * xd, ((x, lambda g: g * (2.0 * xd)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _finish("relu", np.where(mask, x.data, 0.0), ((x, lambda g: g * mask),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _finish("tanh", out, ((x, lambda g: g * (1.0 - out * out)),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Split by sign to stay finite for large |x|.
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _finish("sigmoid", out, ((x, lambda g: g * out * (1.0 - out)),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"exp overflowed for max input {x.data.max()}")
    return _finish("exp", out, ((x, lambda g: g * out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size and x.data.min() <= 0.0:
        raise DomainError(f"log requires strictly positive inputs, min value {x.data.min()}")
    xd = x.data
    return _finish("log", np.log(xd), ((x, lambda g: g / xd),))


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        normalized.append(ax % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return tuple(sorted(normalized))


def _spread(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return np.broadcast_to(g.reshape(keep), shape)


def reduce_sum(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.data.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes if axes else None)
    return _finish(
        "sum",
        np.asarray(out),
        ((x, lambda g: np.ascontiguousarray(_spread(g, shape, axes))),),
    )


def reduce_mean(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.data.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise EmptyReductionError(f"mean over zero elements (shape {x.shape}, axes {axes})")
    shape = x.shape
    inv = 1.0 / count
    out = x.data.mean(axis=axes if axes else None)
    return _finish(
        "mean",
        np.asarray(out),
        ((x, lambda g: np.ascontiguousarray(_spread(g, shape, axes)) * inv),),
    )


# ---------------------------------------------------------------------------
# structure


def detach(t) -> Tensor:
    """Same values, no tape participation."""
    t = as_tensor(t)
    return Tensor(t.data.copy())


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    out = t.data.reshape(shape)
    return _finish("reshape", np.ascontiguousarray(out), ((t, lambda g: g.reshape(old)),))


def permute(t, axes) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    if sorted(axes) != list(range(t.data.ndim)):
        raise ShapeError(f"permute axes {axes} are not a permutation for shape {t.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(t.data, axes))
    return _finish("permute", out, ((t, lambda g: np.ascontiguousarray(np.transpose(g, inverse))),))


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {t.shape}")
    return permute(t, (1, 0))


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat axis {axis} out of range")
    axis = axis % ndim
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def segment(i):
        def fn(g):
            return np.ascontiguousarray(np.split(g, offsets, axis=axis)[i])

        return fn

    return _finish("concat", out, tuple((p, segment(i)) for i, p in enumerate(parts)))


def slice_axis(t, axis: int, start: int, stop: int) -> Tensor:
    t = as_tensor(t)
    ndim = t.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"slice axis {axis} out of range for shape {t.shape}")
    axis = axis % ndim
    extent = t.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise ShapeError(f"slice [{start}:{stop}] invalid for extent {extent}")
    slicer = tuple(slice(start, stop) if d == axis else slice(None) for d in range(ndim))
    shape = t.shape

    def fn(g):
        full = np.zeros(shape)
        full[slicer] = g
        return full

    return _finish("slice", np.ascontiguousarray(t.data[slicer]), ((t, fn),))


def gather_rows(t, indices) -> Tensor:
    """Select rows (axis 0) by index; backward scatter-adds in index order."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows needs a 1-d index list")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise ShapeError(f"gather index out of range for {t.shape[0]} rows")
    shape = t.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _finish("gather_rows", np.ascontiguousarray(t.data[idx]), ((t, fn),))


def repeat_rows(t, n: int) -> Tensor:
    """Tile a single row (shape [S] or [1, S]) into [n, S]."""
    t = as_tensor(t)
    if t.data.ndim == 1:
        row = t.data[None, :]
        reducer = lambda g: g.sum(axis=0)
    elif t.data.ndim == 2 and t.shape[0] == 1:
        row = t.data
        reducer = lambda g: g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"repeat_rows expects shape [S] or [1, S], got {t.shape}")
    out = np.ascontiguousarray(np.broadcast_to(row, (n, row.shape[1])))
    return _finish("repeat_rows", out, ((t, reducer),))
