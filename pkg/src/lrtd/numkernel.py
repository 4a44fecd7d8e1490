"""Dense float64 tensors, the layer primitives the model needs, and tape-based
reverse-mode differentiation.

Every primitive accepts ``Tensor`` inputs and returns a new ``Tensor``.  When a
``Tape`` is active (``with Tape() as tape:``) and at least one input requires a
gradient, the primitive appends a node to the tape.  ``Tape.backward`` walks the
nodes in exact reverse order of execution, accumulating gradients.

Batched forms are supported explicitly (a leading batch axis on 3-D inputs);
there is no general broadcasting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not satisfy a primitive's preconditions."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """A float64 array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data, dtype=DTYPE)
        if _check:
            _check_finite(arr, "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Param:
    """A named learnable array with a gradient buffer of identical shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        _check_finite(self.value, f"Param {self.name!r}")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def tensor(self) -> Tensor:
        """Leaf tensor for this parameter.

        Under an active tape the leaf's gradient buffer aliases ``self.grad``, so
        ``Tape.backward`` accumulates straight into the parameter.
        """
        t = Tensor(self.value, _check=False)
        if _active_tape() is not None:
            t.requires_grad = True
            t.grad = self.grad
        return t


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], None]


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of executed primitives; single use, one training step."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> list[str]:
        """Back-propagate from scalar ``loss``; returns the op names visited."""
        if self._done:
            raise RuntimeError("tape already consumed")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._done = True
        if not loss.requires_grad:
            return []
        loss.grad = np.ones_like(loss.data)
        visited = []
        for node in reversed(self.nodes):
            visited.append(node.op)
            if node.out.grad is None:
                continue
            node.backward(node.out.grad)
        return visited

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward computation from the recorded inputs."""
        return [node.forward(*(t.data for t in node.inputs)) for node in self.nodes]


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(op: str, forward, inputs: Sequence[Tensor], make_backward) -> Tensor:
    data = forward(*(t.data for t in inputs))
    _check_finite(data, op)
    out = Tensor(data, _check=False)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, forward, make_backward(out)))
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry a leading batch axis."""
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise DimensionError(f"matmul needs 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (
        a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]
    ):
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward_for(out):
        def backward(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                if a.data.ndim == 2 and ga.ndim == 3:
                    ga = ga.sum(axis=0)
                _acc(a, ga)
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if b.data.ndim == 2 and gb.ndim == 3:
                    gb = gb.sum(axis=0)
                _acc(b, gb)

        return backward

    return _emit("matmul", np.matmul, (a, b), backward_for)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 axes, got {x.shape}")

    def backward_for(out):
        return lambda g: _acc(x, np.swapaxes(g, -1, -2))

    return _emit("transpose", lambda a: np.ascontiguousarray(np.swapaxes(a, -1, -2)), (x,), backward_for)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def backward_for(out):
        return lambda g: _acc(x, g.reshape(src))

    return _emit("reshape", lambda a: a.reshape(shape), (x,), backward_for)


# ------------------------------------------------------------------ elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward_for(out):
        def backward(g):
            _acc(a, g)
            _acc(b, g)

        return backward

    return _emit("add", np.add, (a, b), backward_for)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add 1-D ``b`` along ``axis`` of ``x`` (the only broadcast we support)."""
    axis = axis % x.data.ndim
    if b.data.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward_for(out):
        def backward(g):
            _acc(x, g)
            _acc(b, g.sum(axis=others))

        return backward

    return _emit("add_bias", lambda xa, ba: xa + ba.reshape(view), (x, b), backward_for)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward_for(out):
        def backward(g):
            _acc(a, g * b.data)
            _acc(b, g * a.data)

        return backward

    return _emit("mul", np.multiply, (a, b), backward_for)


def scale(x: Tensor, c: float) -> Tensor:
    def backward_for(out):
        return lambda g: _acc(x, g * c)

    return _emit("scale", lambda a: a * c, (x,), backward_for)


def tanh(x: Tensor) -> Tensor:
    def backward_for(out):
        return lambda g: _acc(x, g * (1.0 - out.data * out.data))

    return _emit("tanh", np.tanh, (x,), backward_for)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite input
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    def backward_for(out):
        return lambda g: _acc(x, g * out.data * (1.0 - out.data))

    return _emit("sigmoid", _sigmoid, (x,), backward_for)


def sum_all(x: Tensor) -> Tensor:
    def backward_for(out):
        return lambda g: _acc(x, np.full_like(x.data, float(g)))

    return _emit("sum_all", lambda a: np.asarray(a.sum()), (x,), backward_for)


# ------------------------------------------------------------- slicing, stacking


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_for(out):
        def backward(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[index] += g

        return backward

    return _emit("slice", lambda a: a[index].copy(), (x,), backward_for)


def take(x: Tensor, axis: int, i: int) -> Tensor:
    """Select index ``i`` along ``axis``, dropping that axis."""
    axis = axis % x.data.ndim
    sliced = slice_axis(x, axis, i, i + 1)
    shape = x.shape[:axis] + x.shape[axis + 1:]
    return reshape(sliced, shape)


def stack(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    if not xs:
        raise DimensionError("stack of an empty sequence")
    for t in xs[1:]:
        _same_shape("stack", xs[0], t)
    nd = xs[0].data.ndim + 1
    axis = axis % nd

    def backward_for(out):
        def backward(g):
            parts = np.moveaxis(g, axis, 0)
            for t, part in zip(xs, parts):
                _acc(t, part)

        return backward

    return _emit("stack", lambda *arrs: np.stack(arrs, axis=axis), tuple(xs), backward_for)


# ---------------------------------------------------------------- layer kernels


def _softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""

    def backward_for(out):
        def backward(g):
            s = out.data
            _acc(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

        return backward

    return _emit("softmax_rows", _softmax, (x,), backward_for)


def pooled_length(T: int, k: int, s: int) -> int:
    if k > T:
        raise DimensionError(f"pool window {k} exceeds length {T}")
    if k < 1 or s < 1:
        raise DimensionError(f"pool window and stride must be positive, got k={k}, s={s}")
    return (T - k) // s + 1


def _pool_argmax(a: np.ndarray, k: int, s: int) -> np.ndarray:
    T = a.shape[-1]
    n = pooled_length(T, k, s)
    windows = np.lib.stride_tricks.sliding_window_view(a, k, axis=-1)[..., ::s, :][..., :n, :]
    # np.argmax returns the first maximal index, which is the tie-break we want
    return windows.argmax(axis=-1) + (np.arange(n) * s)


def maxpool_time(x: Tensor, k: int, s: int) -> Tensor:
    """Max over windows of the last axis. Gradient goes to the first argmax."""
    idx = _pool_argmax(x.data, k, s)

    def forward(a):
        return np.take_along_axis(a, _pool_argmax(a, k, s), axis=-1)

    def backward_for(out):
        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                flat_idx = idx.reshape(-1, idx.shape[-1])
                flat_g = g.reshape(-1, g.shape[-1])
                rows = gx.reshape(-1, gx.shape[-1])
                for r in range(flat_idx.shape[1]):
                    np.add.at(rows, (np.arange(rows.shape[0]), flat_idx[:, r]), flat_g[:, r])
                _acc(x, gx)

        return backward

    return _emit("maxpool_time", forward, (x,), backward_for)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy: label out of range")
    n = logits.shape[0]
    rows = np.arange(n)

    def forward(a):
        shifted = a - a.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return np.asarray((logz - shifted[rows, labels]).mean())

    def backward_for(out):
        def backward(g):
            p = _softmax(logits.data)
            p[rows, labels] -= 1.0
            _acc(logits, p * (float(g) / n))

        return backward

    return _emit("cross_entropy", forward, (logits,), backward_for)


# ------------------------------------------------------------- gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` builds a scalar from ``Param.tensor()`` leaves.  The error for one
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        out = f().data
        _check_finite(out, "grad_check objective")
        return float(out)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst
