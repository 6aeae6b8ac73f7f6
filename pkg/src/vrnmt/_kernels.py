"""Row-wise numeric kernels shared by the tensor primitives.

Every kernel has a numba ``@njit`` implementation and a pure-numpy one with
identical semantics. The active backend is picked once at import time:
numba is used when it imports cleanly, unless ``VRNMT_NUMBA=0`` is set.
Both backends stay importable (``numpy_backend`` / ``numba_backend``) so
tests and the benchmark can compare them directly.

All kernels take arrays whose last axis is the "row"; leading axes are
flattened internally.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

MASK_FILL = -1e9


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------

def _np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _np_masked_softmax(x, mask):
    scores = np.where(mask > 0, x, x + MASK_FILL)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(mask > 0, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def _np_log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _np_log_softmax_backward(y, g):
    return g - np.exp(y) * g.sum(axis=-1, keepdims=True)


def _np_sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


numpy_backend = SimpleNamespace(
    name="numpy",
    softmax=_np_softmax,
    masked_softmax=_np_masked_softmax,
    softmax_backward=_np_softmax_backward,
    log_softmax=_np_log_softmax,
    log_softmax_backward=_np_log_softmax_backward,
    sigmoid=_np_sigmoid,
)


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------

def _build_numba_backend():
    from numba import njit

    @njit(cache=True)
    def _softmax_2d(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(k):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _masked_softmax_2d(x, mask):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = -np.inf
            for j in range(k):
                v = x[i, j] if mask[i, j] > 0 else x[i, j] + MASK_FILL
                if v > m:
                    m = v
            s = 0.0
            for j in range(k):
                if mask[i, j] > 0:
                    e = np.exp(x[i, j] - m)
                else:
                    e = 0.0
                out[i, j] = e
                s += e
            for j in range(k):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _softmax_backward_2d(y, g):
        n, k = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[i, j] * y[i, j]
            for j in range(k):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _log_softmax_2d(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                s += np.exp(x[i, j] - m)
            lse = np.log(s)
            for j in range(k):
                out[i, j] = (x[i, j] - m) - lse
        return out

    @njit(cache=True)
    def _log_softmax_backward_2d(y, g):
        n, k = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += g[i, j]
            for j in range(k):
                out[i, j] = g[i, j] - np.exp(y[i, j]) * s
        return out

    @njit(cache=True)
    def _sigmoid_flat(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            if v >= 0:
                out[i] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out[i] = e / (1.0 + e)
        return out

    def rows(fn):
        def wrapped(*arrays):
            shape = arrays[0].shape
            flat = [np.ascontiguousarray(a, dtype=np.float64).reshape(-1, shape[-1])
                    for a in arrays]
            return fn(*flat).reshape(shape)
        wrapped.__name__ = fn.__name__
        return wrapped

    def sigmoid(x):
        return _sigmoid_flat(np.ascontiguousarray(x, dtype=np.float64).ravel()).reshape(x.shape)

    def masked_softmax(x, mask):
        mask = np.broadcast_to(mask, x.shape)
        return rows(_masked_softmax_2d)(x, mask)

    return SimpleNamespace(
        name="numba",
        softmax=rows(_softmax_2d),
        masked_softmax=masked_softmax,
        softmax_backward=rows(_softmax_backward_2d),
        log_softmax=rows(_log_softmax_2d),
        log_softmax_backward=rows(_log_softmax_backward_2d),
        sigmoid=sigmoid,
    )


try:
    numba_backend = _build_numba_backend()
except ImportError:  # numba not installed
    numba_backend = None


def _select():
    flag = os.environ.get("VRNMT_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_backend is None:
        return numpy_backend
    return numba_backend


active = _select()


def use_backend(name: str) -> None:
    """Switch the active backend at runtime ("numba" or "numpy")."""
    global active
    if name == "numpy":
        active = numpy_backend
    elif name == "numba":
        if numba_backend is None:
            raise RuntimeError("numba is not available")
        active = numba_backend
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
