"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations record onto the active :class:`Tape` (see :func:`recording`) when at
least one input requires a gradient. Without an active tape they only compute
values, which is how the fast no-grad paths (decoding, counterfactual rewards)
reuse the same model code.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction and replaying it in reverse is a valid backward
    pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Gradients of scalar ``output`` keyed by ``id(tensor)``.

        When ``wrt`` is given, every tensor in it gets an entry, zero if the
        output does not depend on it.
        """
        if output.value.size != 1:
            raise ShapeError("backward (output must be scalar)", output.shape)
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for node in reversed(self.nodes):
            # node outputs are never leaves, so their grads can be released
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            local = node.backward(g)
            for t, gi in zip(node.inputs, local):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if wrt is not None:
            out = {}
            for t in wrt:
                g = grads.get(id(t))
                out[id(t)] = np.zeros_like(t.value) if g is None else g
            return out
        return grads


_state = threading.local()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def recording(tape: Tape | None = None):
    """Make ``tape`` the current thread's recording target."""
    tape = Tape() if tape is None else tape
    previous = active_tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


def _record(inputs: Sequence[Tensor], value: np.ndarray, backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix or vector-matrix product (row-vector convention)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim not in (1, 2) or b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def backward(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _record((a, b), av @ bv, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record((a, b), a.value + b.value, lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return _record((a, b), a.value + b.value, lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _record((a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _record((a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record((a,), a.value * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _record((a,), av * av, lambda g: (2.0 * av * g,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _record((a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _record((a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _record((a,), y, lambda g: (g * (1.0 - y * y),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(tensors, value, backward)


def _softmax_values(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (per row for matrices)."""
    a = _as_tensor(a)
    if a.value.shape[-1] == 0:
        raise ShapeError("softmax", a.shape)
    y = _softmax_values(a.value)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record((a,), y, backward)


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.value.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record((a,), y, backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _record((a,), np.asarray(a.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return total(mul(a, b))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record((a,), value, lambda g: (g.reshape(old),))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column block ``a[:, start:stop]`` of a matrix."""
    a = _as_tensor(a)
    if a.value.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns[{start}:{stop}]", a.shape)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record((a,), a.value[:, start:stop], backward)


# ----------------------------------------------------- indexing / segment ops
# Used to batch agents and ordered pairs of many scenes into flat row blocks.


def take(a: Tensor, index) -> Tensor:
    """Rows of ``a`` (or entries of a vector) selected by an integer array."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError("take (index out of range)", a.shape, index.shape)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record((a,), a.value[index], backward)


def pick(a: Tensor, cols) -> Tensor:
    """``a[r, cols[r]]`` for every row ``r`` of a matrix."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.value.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, cols.shape)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _record((a,), a.value[rows, cols], backward)


def segment_sum(a: Tensor, segments, count: int) -> Tensor:
    """Sum rows of ``a`` into ``count`` buckets; empty buckets are zero."""
    a = _as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise ShapeError("segment_sum", a.shape, segments.shape)
    out = np.zeros((count,) + a.shape[1:])
    np.add.at(out, segments, a.value)
    return _record((a,), out, lambda g: (g[segments],))


def segment_softmax(a: Tensor, segments, count: int) -> Tensor:
    """Softmax of a vector's entries within each segment."""
    a = _as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if a.value.ndim != 1 or segments.shape != a.shape:
        raise ShapeError("segment_softmax", a.shape, segments.shape)
    if a.value.size == 0:
        return _record((a,), np.zeros(0), lambda g: (np.zeros(0),))
    peak = np.full(count, -np.inf)
    np.maximum.at(peak, segments, a.value)
    e = np.exp(a.value - peak[segments])
    norm = np.zeros(count)
    np.add.at(norm, segments, e)
    y = e / norm[segments]

    def backward(g):
        inner = np.zeros(count)
        np.add.at(inner, segments, g * y)
        return (y * (g - inner[segments]),)

    return _record((a,), y, backward)


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``r`` of matrix ``a`` by scalar ``w[r]``."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.value.ndim != 2 or w.shape != (a.shape[0],):
        raise ShapeError("scale_rows", a.shape, w.shape)
    av, wv = a.value, w.value
    return _record((a, w), av * wv[:, None], lambda g: (g * wv[:, None], (g * av).sum(axis=1)))


# ------------------------------------------------------------ verification


def gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Run ``loss_fn`` under a fresh tape and return d loss / d param for each param."""
    with recording() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, wrt=params)
    return [grads[id(p)] for p in params]


def finite_diff_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4, floor: float = 1e-6
) -> float:
    """Max relative error between tape gradients and numerical derivatives.

    Every coordinate of every parameter is perturbed in place and restored.
    The numerical derivative uses the fourth-order central stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``. The relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps gradients that are
    exactly zero (the stencil returns rounding noise there) from dividing by
    nothing.
    """
    analytic = gradients(loss_fn, params)
    base = float(loss_fn().value)
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite")
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            values = []
            for offset in (2.0, 1.0, -1.0, -2.0):
                flat[k] = orig + offset * step
                values.append(float(loss_fn().value))
            flat[k] = orig
            if not np.all(np.isfinite(values)):
                raise FloatingPointError("loss is not finite under perturbation")
            numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * step)
            a = gflat[k]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
