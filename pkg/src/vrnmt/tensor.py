"""Dense float64 tensors with reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a ``with Tape():`` block nothing
is recorded, which is the fast path used by decoding.

Broadcasting is explicit: elementwise binary ops require equal shapes, bias
vectors go through :func:`add_bias`, and :func:`expand` repeats a tensor
along a new axis. Constant (non-differentiable) masks go through
:func:`apply_mask`, which is the only op that broadcasts a plain array.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

LOG_FLOOR = 1e-300


class GraphError(RuntimeError):
    """Structural misuse of the computation graph."""


class NonFiniteError(FloatingPointError):
    """A non-finite value showed up where finite values are required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def current_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of executed primitives; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        run_backward(self, loss)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        node = Node(kind, inputs, out, backward)
        out.node = node
        tape.nodes.append(node)
    return out


def run_backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves accumulate additively, so callers must zero gradients between
    steps. Intermediate gradients are discarded after use.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss was not produced by a recorded operation")
    try:
        end = _index_of(tape, loss.node)
    except ValueError:
        raise GraphError("loss is not part of this tape") from None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True).reshape(inp.shape)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _index_of(tape: Tape, node: Node) -> int:
    # the loss is almost always the last node
    for k in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[k] is node:
            return k
    raise ValueError


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def _same_shape(kind, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    n = b.shape[0]
    return _make("add_bias", x.data + b.data, (x, b),
                 lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a weight ``b`` of rank 1 or 2, or a batched rank-3 pair."""
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    if bd.ndim == 1:
        def backward(g):
            return g[..., None] * bd, (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
    elif bd.ndim == 2:
        k, n = bd.shape

        def backward(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)
    elif ad.ndim == bd.ndim == 3:
        def backward(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
    else:
        raise ValueError(f"matmul: unsupported shapes {ad.shape} @ {bd.shape}")
    return _make("matmul", out, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _kernels.active.sigmoid(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def expm1(x: Tensor) -> Tensor:
    y = np.expm1(x.data)
    return _make("expm1", y, (x,), lambda g: (g * (y + 1.0),))


def log(x: Tensor) -> Tensor:
    xd = np.maximum(x.data, LOG_FLOOR)
    return _make("log", np.log(xd), (x,),
                 lambda g: (np.where(x.data >= LOG_FLOOR, g / xd, 0.0),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked entries get exactly zero weight."""
    k = _kernels.active
    if mask is None:
        y = k.softmax(x.data)
    else:
        y = k.masked_softmax(x.data, np.asarray(mask, dtype=np.float64))
    return _make("softmax", y, (x,), lambda g: (_kernels.active.softmax_backward(y, g),))


def log_softmax(x: Tensor) -> Tensor:
    y = _kernels.active.log_softmax(x.data)
    return _make("log_softmax", y, (x,),
                 lambda g: (_kernels.active.log_softmax_backward(y, g),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make("concat", np.concatenate([p.data for p in parts], axis=-1), parts, backward)


def stack(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make("stack", np.stack([p.data for p in parts], axis=axis), parts, backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make("slice", x.data[..., start:stop], (x,), backward)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make("slice", x.data[key], (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``size`` times along it."""
    y = np.repeat(np.expand_dims(x.data, axis), size, axis=axis)
    return _make("expand", y, (x,), lambda g: (g.sum(axis=axis),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make("sum", x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), backward)


def apply_mask(x: Tensor, mask) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (dropout, padding)."""
    m = np.asarray(mask, dtype=np.float64)
    return _make("mask", x.data * m, (x,),
                 lambda g: (np.broadcast_to(g * m, x.shape).copy(),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return apply_mask(x, keep / (1.0 - rate))


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def check_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   step: float = 1e-5, coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps tensors (one per entry of ``inputs``) to a scalar tensor.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``coords`` set, only that many randomly chosen coordinates per input are
    probed (every coordinate when the input is smaller).
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    leaves = [parameter(a) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite")
    run_backward(tape, out)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def value():
        v = fn(*[constant(a) for a in arrays]).item()
        if not np.isfinite(v):
            raise NonFiniteError("non-finite value during finite differencing")
        return v

    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst
