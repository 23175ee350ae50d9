"""Rank-4 tensors with tape-based reverse-mode differentiation.

Every value is an (N, C, H, W) array. Operations executed while gradient
recording is enabled append a :class:`TapeNode` to a thread-local tape;
:func:`backward` replays that tape in reverse.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    return shape


class Tensor:
    """An (N, C, H, W) array plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"expected a rank-4 array, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def values(self):
        return self.data.ravel().tolist()

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad)


def full(shape, value, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype), requires_grad)


def from_values(shape, values, dtype=DEFAULT_DTYPE, requires_grad=False):
    shape = _check_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ShapeError(f"{flat.size} values given for shape {shape} ({expected} needed)")
    return Tensor(flat.reshape(shape).copy(), requires_grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeNode:
    op_id: str
    inputs: tuple
    output: Tensor
    backward: Callable
    saved: dict = field(default_factory=dict)


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def is_grad_enabled():
    return current_tape().enabled


def make_output(op_id, out, inputs, backward_fn, **saved):
    """Wrap a forward result and record it on the tape when needed."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op_id} produced a non-finite value")
    tape = current_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(op_id, tuple(inputs), result, backward_fn, saved))
    return result


def backward(loss: Tensor):
    """Fill ``.grad`` of every tracked tensor that ``loss`` depends on."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that is not tracked")
    tape = current_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    for key, g in grads.items():
        t = owners[key]
        if t.grad is None:
            t.grad = g
        else:
            t.grad = t.grad + g
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _broadcast_ok(a_shape, b_shape):
    return all(bs == as_ or bs == 1 for as_, bs in zip(a_shape, b_shape))


def _unbroadcast(g, shape):
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: cannot broadcast {b.shape} against {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bw(g):
        return g, _unbroadcast(g, b.shape)

    return make_output("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def bw(g):
        return g, -_unbroadcast(g, b.shape)

    return make_output("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may broadcast along any singleton axis."""
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _unbroadcast(g * ad, b.shape)

    return make_output("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_output("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def concat(tensors: Sequence[Tensor], axis=1) -> Tensor:
    """Join along the channel (1) or width (3) axis."""
    if axis not in (1, 2, 3):
        raise ShapeError(f"concat axis must be 1, 2 or 3, got {axis}")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if any(t.shape[i] != ref[i] for i in range(4) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_output("concat", out, tuple(tensors), bw)


def split(x: Tensor, sizes: Sequence[int], axis=1) -> list:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * 4
        idx[axis] = slice(start, start + n)
        idx = tuple(idx)

        def bw(g, idx=idx):
            full_g = np.zeros_like(x.data)
            full_g[idx] = g
            return (full_g,)

        outs.append(make_output("split", x.data[idx], (x,), bw))
        start += n
    return outs


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != [0, 1, 2, 3]:
        raise ShapeError(f"invalid permutation {axes}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_output("permute", out, (x,), lambda g: (g.transpose(inverse),))


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return make_output("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = (x.data.sum(dtype=np.float64) / n).astype(x.dtype).reshape(1, 1, 1, 1)
    return make_output("mean", out, (x,), lambda g: (np.full(x.shape, g.item() / n, dtype=x.dtype),))
