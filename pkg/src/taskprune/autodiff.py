"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (if any). Without an
active tape they simply compute, which is the fast path used for inference.

    with Tape() as tape:
        x = Tensor(np.ones((2, 3)))
        h = tape.probe("hidden", relu(matmul(x, w)))
        loss = sum_all(h)
    grads = tape.backward(loss)
    grads.probe_grad("hidden")
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """A float64 array plus an optional handle into the tape that produced it."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: Optional[int] = None, tape: Optional["Tape"] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple[int, ...]


@dataclass
class Gradients:
    """Gradients of one scalar with respect to every node of a tape."""

    tape: "Tape"
    by_node: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self.tape:
            raise TapeError("tensor was not recorded on this tape")
        return self.node_grad(t.node)

    def node_grad(self, node: int) -> np.ndarray:
        g = self.by_node.get(node)
        if g is None:
            return np.zeros(self.tape.nodes[node].shape, dtype=DTYPE)
        return g

    def probe_value(self, name: str) -> np.ndarray:
        return self.tape.probes[name].data

    def probe_grad(self, name: str) -> np.ndarray:
        return self[self.tape.probes[name]]


class Tape:
    """Append-only record of one forward pass.

    Node ids are positions in ``nodes``; inputs always precede outputs, so a
    single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.probes: dict[str, Tensor] = {}
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def leaf(self, data) -> Tensor:
        """Register a differentiable input (parameter or activation source)."""
        arr = np.asarray(data, dtype=DTYPE)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, len(self.nodes) - 1, self)

    def record(self, kind, inputs, out, backward) -> Tensor:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        ids = tuple(self._node_of(t) for t in inputs)
        self.nodes.append(_Node(kind, ids, backward, out.shape))
        return Tensor(out, len(self.nodes) - 1, self)

    def _node_of(self, t) -> Optional[int]:
        if isinstance(t, Tensor) and t.tape is self:
            return t.node
        return None

    def probe(self, name: str, t: Tensor) -> Tensor:
        if name in self.probes:
            raise TapeError(f"duplicate probe name {name!r}")
        if not isinstance(t, Tensor) or t.tape is not self:
            raise TapeError(f"probe {name!r} target is not recorded on this tape")
        self.probes[name] = t
        return t

    def backward(self, loss: Tensor) -> Gradients:
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=DTYPE)}
        for nid in range(loss.node, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if inp is None or gi is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
        return Gradients(self, grads)


def probe(name: str, t: Tensor) -> Tensor:
    """Register ``t`` under ``name`` on the active tape; no-op without one."""
    tape = _active_tape()
    if tape is not None:
        tape.probe(name, t)
    return t


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _tracked(x) -> bool:
    tape = _active_tape()
    return tape is not None and isinstance(x, Tensor) and x.tape is tape


def _emit(kind, inputs, out, backward) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(isinstance(t, Tensor) and t.tape is tape for t in inputs):
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        return Tensor(out)
    return tape.record(kind, inputs, out, backward)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    out = x + y
    return _emit("add", (a, b), out, lambda g: (unbroadcast(g, x.shape), unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    out = x - y
    return _emit("sub", (a, b), out, lambda g: (unbroadcast(g, x.shape), -unbroadcast(g, y.shape)))


def mul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    out = x * y
    need_a, need_b = _tracked(a), _tracked(b)

    def backward(g):
        return (
            unbroadcast(g * y, x.shape) if need_a else None,
            unbroadcast(g * x, y.shape) if need_b else None,
        )

    return _emit("mul", (a, b), out, backward)


def power(a, exponent: float) -> Tensor:
    x = _data(a)
    out = x**exponent
    return _emit("power", (a,), out, lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_data(a))
    return _emit("exp", (a,), out, lambda g: (g * out,))


def relu(a) -> Tensor:
    x = _data(a)
    pos = x > 0
    out = np.where(pos, x, 0.0)
    return _emit("relu", (a,), out, lambda g: (np.where(pos, g, 0.0),))


def _rows(x: np.ndarray) -> int:
    # explicit row count: reshape(-1, 0) is ambiguous for empty arrays
    return int(np.prod(x.shape[:-1], dtype=np.int64))


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like ``np.matmul``."""
    x, y = _data(a), _data(b)
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
    flat = y.ndim == 2 and x.ndim > 2
    if flat:
        # batched activations @ weight: one 2-d product instead of a stack
        out = (x.reshape(_rows(x), x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    else:
        out = x @ y
    need_a, need_b = _tracked(a), _tracked(b)

    def backward(g):
        ga = gb = None
        if need_a:
            if flat:
                ga = (g.reshape(_rows(g), g.shape[-1]) @ y.T).reshape(x.shape)
            else:
                ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if need_b:
            if y.ndim == 2:
                gb = x.reshape(_rows(x), x.shape[-1]).T @ g.reshape(_rows(g), g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _data(a)
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (a,), out, backward)


def sum_all(a) -> Tensor:
    return sum_(a)


def mean(a, axis, keepdims: bool = False) -> Tensor:
    x = _data(a)
    n = np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    x = _data(a)
    out = x.reshape(shape)
    return _emit("reshape", (a,), out, lambda g: (g.reshape(x.shape),))


def transpose(a, axes) -> Tensor:
    out = np.transpose(_data(a), axes)
    inv = np.argsort(axes)
    return _emit("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    w = _data(table)
    idx = np.asarray(ids)
    out = w[idx]

    def backward(g):
        gw = np.zeros_like(w)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, w.shape[-1]))
        return (gw,)

    return _emit("take_rows", (table,), out, backward)


def pick_last(a, index) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` (gather one entry along the last axis)."""
    x = _data(a)
    idx = np.asarray(index)[..., None]
    out = np.take_along_axis(x, idx, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _emit("pick_last", (a,), out, backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = _data(a)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _data(a)
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward)


def rms_norm(a, gain, eps: float = 1e-6) -> Tensor:
    """``a / sqrt(mean(a**2) + eps) * gain`` over the last axis, built from primitives."""
    ms = mean(mul(a, a), axis=-1, keepdims=True)
    return mul(mul(a, power(add(ms, eps), -0.5)), gain)
