"""Reverse-mode autodiff over numpy arrays, with higher-order support.

Every operation's vjp rule is itself written in terms of these primitives,
so running :func:`grad` with ``create_graph=True`` records the backward pass
on the tape and the result stays differentiable. That is what makes
penalties on input gradients trainable (double backpropagation).

Recording state lives in context variables, so independent computations on
different threads never share a graph.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import InputError

_RECORDING = contextvars.ContextVar("jsmkit_autodiff_recording", default=True)
_ACTIVE_TAPE = contextvars.ContextVar("jsmkit_autodiff_tape", default=None)


class Tensor:
    """An n-d float64 value, optionally carrying its place in the graph."""

    def __init__(self, data, parents: tuple = (), vjp: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self.vjp is None})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return neg(self)


class Tape:
    """Execution-ordered record of primitive operations.

    The list is topologically ordered by construction. ``replay`` re-executes
    every recorded forward function against the current leaf values, which is
    what makes the record verifiable.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def record(self, out: Tensor, parents: tuple, forward: Callable) -> None:
        self.records.append((out, parents, forward))

    def replay(self) -> None:
        for out, parents, forward in self.records:
            out.data = forward(*[p.data for p in parents])

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False


@contextlib.contextmanager
def no_grad():
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, vjp, forward) -> Tensor:
    if not _RECORDING.get():
        return Tensor(data)
    out = Tensor(data, parents=parents, vjp=vjp)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(out, parents, forward)
    return out


# -- shape plumbing ---------------------------------------------------------


def sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast)."""
    if t.shape == tuple(shape):
        return t
    extra = t.data.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != tuple(shape):
        t = reshape(t, shape)
    return t


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def vjp(cot):
        return (sum_to(cot, a.shape),)

    return _make(data, (a,), vjp, lambda x: np.broadcast_to(x, shape))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def vjp(cot):
        return (reshape(cot, old),)

    return _make(a.data.reshape(shape), (a,), vjp, lambda x: x.reshape(shape))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(cot):
        return (transpose(cot, inv),)

    return _make(a.data.transpose(axes), (a,), vjp, lambda x: x.transpose(axes))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[axis] for p in parts]

    def vjp(cot):
        outs = []
        start = 0
        for n in sizes:
            outs.append(slice_axis(cot, axis, start, start + n))
            start += n
        return tuple(outs)

    return _make(
        np.concatenate([p.data for p in parts], axis=axis), parts, vjp,
        lambda *xs: np.concatenate(xs, axis=axis),
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sel = [slice(None)] * a.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)

    def vjp(cot):
        before = list(cot.shape)
        before[axis] = start
        after = list(cot.shape)
        after[axis] = a.shape[axis] - stop
        parts = []
        if start > 0:
            parts.append(Tensor(np.zeros(before)))
        parts.append(cot)
        if after[axis] > 0:
            parts.append(Tensor(np.zeros(after)))
        return (concat(parts, axis) if len(parts) > 1 else cot,)

    return _make(a.data[sel], (a,), vjp, lambda x: x[sel])


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(cot):
        return (sum_to(cot, a.shape), sum_to(cot, b.shape))

    return _make(a.data + b.data, (a, b), vjp, lambda x, y: x + y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(cot):
        return (sum_to(cot, a.shape), sum_to(neg(cot), b.shape))

    return _make(a.data - b.data, (a, b), vjp, lambda x, y: x - y)


def neg(a: Tensor) -> Tensor:
    def vjp(cot):
        return (neg(cot),)

    return _make(-a.data, (a,), vjp, lambda x: -x)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(cot):
        return (sum_to(mul(cot, b), a.shape), sum_to(mul(cot, a), b.shape))

    return _make(a.data * b.data, (a, b), vjp, lambda x, y: x * y)


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, power(b, -1.0))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def vjp(cot):
        return (mul(cot, mul(Tensor(exponent), power(a, exponent - 1.0))),)

    return _make(a.data ** exponent, (a,), vjp, lambda x: x ** exponent)


def exp(a: Tensor) -> Tensor:
    def vjp(cot):
        return (mul(cot, exp(a)),)

    return _make(np.exp(a.data), (a,), vjp, np.exp)


def log(a: Tensor) -> Tensor:
    def vjp(cot):
        return (mul(cot, power(a, -1.0)),)

    return _make(np.log(a.data), (a,), vjp, np.log)


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient is gated by the winner."""
    mask = (a.data > floor).astype(np.float64)

    def vjp(cot):
        return (mul(cot, Tensor(mask)),)

    return _make(np.maximum(a.data, floor), (a,), vjp, lambda x: np.maximum(x, floor))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)

    def vjp(cot):
        if not keepdims:
            kd = list(in_shape)
            for ax in axes:
                kd[ax] = 1
            cot = reshape(cot, kd)
        return (broadcast_to(cot, in_shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp,
                 lambda x: x.sum(axis=axis, keepdims=keepdims))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InputError("matmul supports 2-D operands only")

    def vjp(cot):
        return (matmul(cot, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), cot))

    return _make(a.data @ b.data, (a, b), vjp, lambda x, y: x @ y)


# -- nonlinearities ---------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)

    def vjp(cot):
        # second derivative treated as zero almost everywhere
        return (mul(cot, Tensor(mask)),)

    return _make(a.data * mask, (a,), vjp, lambda x: np.maximum(x, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    data = _stable_sigmoid(a.data)

    def vjp(cot):
        s = sigmoid(a)
        return (mul(cot, mul(s, sub(Tensor(1.0), s))),)

    return _make(data, (a,), vjp, _stable_sigmoid)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor, beta: float = 1.0) -> Tensor:
    """(1/beta) * log(1 + exp(beta x)), computed overflow-safely."""

    def fwd(x):
        bx = beta * x
        return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta

    def vjp(cot):
        return (mul(cot, sigmoid(mul(Tensor(beta), a))),)

    return _make(fwd(a.data), (a,), vjp, fwd)


# -- 3D convolution / pooling support ---------------------------------------
#
# im2col / col2im are an exact adjoint pair for the fixed kernel-3, stride-1,
# padding-1 geometry used by the network, so convolution reduces to matmul
# and all higher derivatives follow from the pairing.

_K3_OFFSETS = [(dx, dy, dz) for dx in range(3) for dy in range(3) for dz in range(3)]


def _im2col_data(x: np.ndarray) -> np.ndarray:
    b, c, w, h, d = x.shape
    xp = np.zeros((b, c, w + 2, h + 2, d + 2))
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    # gather with contiguous writes, then one optimized transpose copy
    cols = np.empty((b, c, 27, w, h, d))
    for k, (dx, dy, dz) in enumerate(_K3_OFFSETS):
        cols[:, :, k] = xp[:, :, dx : dx + w, dy : dy + h, dz : dz + d]
    return np.ascontiguousarray(cols.transpose(0, 3, 4, 5, 1, 2)).reshape(
        b * w * h * d, c * 27
    )


def _col2im_data(cols: np.ndarray, x_shape) -> np.ndarray:
    b, c, w, h, d = x_shape
    cols6 = cols.reshape(b, w, h, d, c, 27)
    xp = np.zeros((b, c, w + 2, h + 2, d + 2))
    for k, (dx, dy, dz) in enumerate(_K3_OFFSETS):
        xp[:, :, dx : dx + w, dy : dy + h, dz : dz + d] += cols6[..., k].transpose(
            0, 4, 1, 2, 3
        )
    return xp[:, :, 1:-1, 1:-1, 1:-1]


def im2col3d(x: Tensor) -> Tensor:
    """(B, C, W, H, D) -> (B*W*H*D, C*27) patch matrix for 3x3x3/s1/p1."""
    shape = x.shape

    def vjp(cot):
        return (col2im3d(cot, shape),)

    return _make(_im2col_data(x.data), (x,), vjp, _im2col_data)


def col2im3d(cols: Tensor, x_shape) -> Tensor:
    x_shape = tuple(x_shape)

    def vjp(cot):
        return (im2col3d(cot),)

    return _make(
        _col2im_data(cols.data, x_shape), (cols,), vjp,
        lambda c: _col2im_data(c, x_shape),
    )


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis with constant indices (max-pool selection)."""
    idx = index[..., None]

    def fwd(x):
        return np.take_along_axis(x, idx, axis=-1)[..., 0]

    def vjp(cot):
        return (put_last(cot, index, a.shape),)

    return _make(fwd(a.data), (a,), vjp, fwd)


def put_last(a: Tensor, index: np.ndarray, out_shape) -> Tensor:
    """Scatter along a new last axis at constant indices (adjoint of take)."""
    out_shape = tuple(out_shape)
    idx = index[..., None]

    def fwd(x):
        out = np.zeros(out_shape)
        np.put_along_axis(out, idx, x[..., None], axis=-1)
        return out

    def vjp(cot):
        return (take_last(cot, index),)

    return _make(fwd(a.data), (a,), vjp, fwd)


# -- gradients --------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    root: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Cotangents of a scalar ``root`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the accumulation itself is built from recorded
    primitives, so the returned tensors can be differentiated again. Tensors
    that do not influence ``root`` get zero cotangents.
    """
    if root.data.size != 1:
        raise InputError(f"grad root must be scalar, got shape {root.shape}")

    wrt_ids = {id(t) for t in wrt}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        cots: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
        for node in reversed(_toposort(root)):
            cot = cots.get(id(node))
            if cot is None:
                continue
            if node.vjp is not None:
                for parent, pc in zip(node.parents, node.vjp(cot)):
                    if pc is None:
                        continue
                    prev = cots.get(id(parent))
                    cots[id(parent)] = pc if prev is None else add(prev, pc)
            if id(node) not in wrt_ids:
                del cots[id(node)]  # cotangent fully consumed; free it
        return [cots.get(id(t), Tensor(np.zeros_like(t.data))) for t in wrt]
