"""Tape-based reverse-mode automatic differentiation over dense float64 grids.

Every tensor is rank 2 (rank-1 input is promoted to a single row).  Operations
executed while a :class:`Tape` is active, and whose inputs require gradients,
are recorded on that tape; :func:`backward` replays the tape in reverse.
Outside a tape the same functions just compute values, which is what the
decoders and finite-difference probes rely on.

Batches are carried as rows.  There is no implicit broadcasting: adding a bias
row to a batch goes through :func:`add_row`, scaling by a row through
:func:`mul_row`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "backward",
    "zero_grads",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "hadamard",
    "add_row",
    "mul_row",
    "concat",
    "activation",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "take_rows",
    "row",
    "rows",
    "weighted_sum",
    "sum_all",
    "nll",
    "finite_difference_check",
]

LOG_CLAMP = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_grid(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise DimensionError(f"tensors are at most rank 2, got shape {arr.shape}")


class Tensor:
    """A value grid with a same-shaped gradient grid.

    ``grad`` is materialised lazily and reads as zeros until something is
    accumulated into it.
    """

    __slots__ = ("values", "_grad", "requires_grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = _as_grid(values)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t._grad = None
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values.shape:
            raise DimensionError(f"grad shape {value.shape} != value shape {self.values.shape}")
        self._grad = value.copy()

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar for the elementwise and matrix ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes are confined to the thread that opened
    them and may be nested (the innermost one records).
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, backward_fn))


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(values)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                tape._record(out, inputs, backward_fn)
                break
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every tensor reachable from ``loss``.

    Leaf tensors (parameters) accumulate; intermediate gradients from an
    earlier call on the same tape are discarded first.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].out is not loss:
        raise ValueError("loss was not recorded on this tape")
    for node in tape.nodes:
        node.out._grad = None
    loss._grad = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.out._grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._grad is None:
                # fresh arrays are adopted; g itself and views of it are copied
                inp._grad = gi.copy() if (gi is g or gi.base is not None) else gi
            else:
                inp._grad += gi


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# linear algebra and elementwise arithmetic
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


_ELEMENTWISE = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def add_row(x: Tensor, r: Tensor) -> Tensor:
    """Add the single row ``r`` to every row of ``x`` (bias addition)."""
    if r.shape[0] != 1 or r.shape[1] != x.shape[1]:
        raise DimensionError(f"add_row: row {r.shape} does not fit {x.shape}")
    return _emit(x.values + r.values, (x, r), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_row(x: Tensor, r: Tensor) -> Tensor:
    """Multiply every row of ``x`` componentwise by the single row ``r``."""
    if r.shape[0] != 1 or r.shape[1] != x.shape[1]:
        raise DimensionError(f"mul_row: row {r.shape} does not fit {x.shape}")
    xv, rv = x.values, r.values
    return _emit(xv * rv, (x, r), lambda g: (g * rv, (g * xv).sum(axis=0, keepdims=True)))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ValueError("concat: empty list")
    if axis not in (0, 1):
        raise ValueError(f"concat: axis must be 0 or 1, got {axis}")
    off = 1 - axis
    ref = parts[0].shape[off]
    for p in parts:
        if p.shape[off] != ref:
            raise DimensionError(f"concat: off-axis dims differ, {[q.shape for q in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        if axis == 1:
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[bounds[i] : bounds[i + 1], :] for i in range(len(parts)))

    return _emit(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), bw)


# --------------------------------------------------------------------------
# pointwise nonlinearities
# --------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    v = x.values
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _emit(v * cdf, (x,), bw)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "gelu": gelu}


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "none":
        return x
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    v = x.values
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), bw)


# --------------------------------------------------------------------------
# indexing and reductions
# --------------------------------------------------------------------------


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into those rows."""
    idx = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row id out of range [0, {n}): {idx.tolist()}")

    def bw(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(table.values[idx], (table,), bw)


def row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` of ``x`` as a 1 x cols tensor."""
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"row {i} out of range for shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.values)
        full[i] = g[0]
        return (full,)

    return _emit(x.values[i : i + 1], (x,), bw)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of ``x``."""
    if not 0 <= start < stop <= x.shape[0]:
        raise IndexError(f"rows {start}:{stop} out of range for shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        return (full,)

    return _emit(x.values[start:stop], (x,), bw)


def weighted_sum(parts: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_i weights[0, i] * parts[i]`` with scalar weights held in a 1 x n row."""
    if not parts:
        raise ValueError("weighted_sum: empty list")
    if weights.shape != (1, len(parts)):
        raise DimensionError(f"weighted_sum: weights {weights.shape} for {len(parts)} parts")
    for p in parts:
        _check_same(p, parts[0], "weighted_sum")
    w = weights.values[0]
    out = np.zeros_like(parts[0].values)
    for wi, p in zip(w, parts):
        out = out + wi * p.values

    def bw(g):
        gw = np.array([[float((g * p.values).sum()) for p in parts]])
        return tuple(wi * g for wi in w) + (gw,)

    return _emit(out, tuple(parts) + (weights,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.array([[x.values.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def nll(probs: Tensor, targets, weights) -> Tensor:
    """``-sum_b weights[b] * log(max(probs[b, targets[b]], 1e-12))``.

    Rows with weight zero contribute exactly nothing, value or gradient.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if t.shape[0] != probs.shape[0] or w.shape[0] != probs.shape[0]:
        raise DimensionError(f"nll: {probs.shape[0]} rows vs {t.shape[0]} targets, {w.shape[0]} weights")
    rows = np.arange(t.shape[0])
    picked = probs.values[rows, t]
    live = w != 0
    clamped = np.maximum(picked, LOG_CLAMP)
    value = -float(np.sum(w[live] * np.log(clamped[live])))

    def bw(g):
        full = np.zeros_like(probs.values)
        ok = live & (picked > LOG_CLAMP)
        full[rows[ok], t[ok]] = -g[0, 0] * w[ok] / picked[ok]
        return (full,)

    return _emit(np.array([[value]]), (probs,), bw)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values and must
    be deterministic.  The error per component is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param[{i}]", p) for i, p in enumerate(params)]
    tensors = [p for _, p in named]
    zero_grads(tensors)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for name, p in named:
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite analytic gradient in {name}")
        vals = p.values
        for k in range(vals.size):
            idx = np.unravel_index(k, vals.shape)
            orig = vals[idx]
            vals[idx] = orig + h
            up = f().item()
            vals[idx] = orig - h
            down = f().item()
            vals[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{k}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    zero_grads(tensors)
    return worst
