"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Gradients are computed by recording every
differentiable operation on an explicit tape while a `record()` block is
active, then replaying the tape in reverse. Forward execution order is a
topological order of the graph, so a single reverse sweep visits each
recorded operation exactly once.

Tensors are immutable once produced by an op; a Tape is single-owner and
is consumed by `backward`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "record",
    "backward",
    "matmul",
    "concat_channels",
    "reduce_max_points",
    "relu",
    "softmax_rows",
    "transpose_last",
    "take",
    "reshape",
    "mean_last",
    "mean_all",
    "sum_all",
    "power",
    "finite_diff_grad",
    "log_matmul_shapes",
]


class Tensor:
    """A dense float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

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

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops, consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def _append(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> None:
        self.nodes.append((out, inputs, bwd))
        out._tape = self

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns a map from `id(tensor)` to its gradient for every
        requires_grad leaf that the loss depends on. Parameters listed in
        `params` but unreachable from the loss get an explicit zero entry.
        """
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, bwd in reversed(self.nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue  # branch not reaching the loss
            for t, g in zip(inputs, bwd(g_out)):
                if g is None:
                    continue
                if t._tape is self:
                    pass  # intermediate of this tape
                elif t.requires_grad:
                    leaves[id(t)] = t
                else:
                    continue  # constant input
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        result = {tid: Tensor(grads[tid]) for tid in leaves}
        if params is not None:
            for p in params:
                if id(p) not in result:
                    result[id(p)] = Tensor(np.zeros_like(p.data))
        self.nodes.clear()
        self.consumed = True
        return result


_TAPE_STACK: list[Tape] = []

# instrumentation: matmul output shapes observed inside a log_matmul_shapes block
_MATMUL_SHAPE_LOGS: list[list[tuple[int, ...]]] = []


@contextmanager
def record():
    """Activate a fresh tape for the enclosed forward pass."""
    tape = Tape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


@contextmanager
def log_matmul_shapes():
    """Collect the output shape of every matmul run in the block."""
    log: list[tuple[int, ...]] = []
    _MATMUL_SHAPE_LOGS.append(log)
    try:
        yield log
    finally:
        _MATMUL_SHAPE_LOGS.pop()


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Run the backward pass on the tape that recorded `loss`."""
    if loss._tape is None:
        raise ContractError("loss was not produced under an active record() block")
    return loss._tape.backward(loss, params=params)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    _finite_or_raise(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        tape._append(out, inputs, bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit(
        "add",
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit(
        "sub",
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if _MATMUL_SHAPE_LOGS:
        _MATMUL_SHAPE_LOGS[-1].append(out.shape)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (channel) axis, preserving part order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels parts disagree on leading extents: "
                f"{[p.shape for p in parts]}"
            )
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit("concat_channels", out, tuple(parts), bwd)


def reduce_max_points(x: Tensor) -> Tensor:
    """Per-channel maximum over the point axis (second to last).

    Gradient routes to the first (lowest point index) argmax per channel.
    """
    if x.ndim < 2:
        raise ShapeError(f"reduce_max_points needs at least 2 axes, got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("reduce_max_points on an empty point set")
    out = x.data.max(axis=-2)
    idx = x.data.argmax(axis=-2)  # first occurrence on ties

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _emit("reduce_max_points", out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _emit("relu", out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit("softmax_rows", s, (x,), bwd)


def transpose_last(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit("transpose_last", out, (x,), bwd)


def take(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather `table[idx]` from a 1-D table of learned entries."""
    if table.ndim != 1:
        raise ShapeError(f"take expects a 1-D table, got {table.shape}")
    idx = np.asarray(idx)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.ravel())
        return (gt,)

    return _emit("take", out, (table,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), bwd)


def mean_last(x: Tensor) -> Tensor:
    """Mean over the last axis, keeping the axis with extent 1."""
    n = x.shape[-1]
    out = x.data.mean(axis=-1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean_last", out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum_all", out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean_all", out, (x,), bwd)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _emit("power", out, (x,), bwd)


def _as_float(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def finite_diff_grad(
    f: Callable[[Tensor], float],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Probes every element of `x`, or only the given flat `indices`;
    unprobed entries stay zero.
    """
    grad = np.zeros(x.size)
    probe = range(x.size) if indices is None else indices
    for i in probe:
        orig = x.data.flat[i]
        x.data.flat[i] = orig + h
        up = _as_float(f(x))
        x.data.flat[i] = orig - h
        dn = _as_float(f(x))
        x.data.flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericError(f"non-finite evaluation while probing flat index {i}")
        grad[i] = (up - dn) / (2.0 * h)
    return grad.reshape(x.shape)
