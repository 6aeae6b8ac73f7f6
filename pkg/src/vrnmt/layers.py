"""Embeddings, GRU cells, the bidirectional encoder and additive attention.

All functions are batch-first: vectors are rows of a ``(B, d)`` tensor and
source annotations are ``(B, T, 2*d_h)``. GRU weights are packed with gate
columns ordered ``[reset | update | candidate]``; recurrent weights are split
into ``U_ru`` (gates) and ``U`` (candidate) because the candidate sees
``r * s`` instead of ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Annotations:
    states: Tensor  # (B, T, 2*d_h)
    mask: np.ndarray  # (B, T), 1.0 on real tokens
    keys: Tensor | None = None  # U_a h_i, cached per sentence

    @property
    def length(self) -> int:
        return self.states.shape[1]


@dataclass
class AttentionResult:
    context: Tensor  # (B, 2*d_h)
    weights: Tensor  # (B, T)


def gru_core(s_prev: Tensor, gx: Tensor, U_ru: Tensor, U: Tensor) -> Tensor:
    """GRU transition given the already projected input ``gx`` (bias included)."""
    d = s_prev.shape[-1]
    ru = T.sigmoid(T.add(T.slice_last(gx, 0, 2 * d), T.matmul(s_prev, U_ru)))
    r = T.slice_last(ru, 0, d)
    u = T.slice_last(ru, d, 2 * d)
    cand = T.tanh(T.add(T.slice_last(gx, 2 * d, 3 * d), T.matmul(T.mul(r, s_prev), U)))
    return T.add(s_prev, T.mul(u, T.sub(cand, s_prev)))


def gru_step(s_prev: Tensor, inputs: Tensor, W: Tensor, U_ru: Tensor, U: Tensor,
             b: Tensor) -> Tensor:
    """Standard GRU step on a concatenated input vector."""
    return gru_core(s_prev, T.add_bias(T.matmul(inputs, W), b), U_ru, U)


def variational_gru_step(y_emb: Tensor, s: Tensor, c: Tensor, z: Tensor | None,
                         params: dict[str, Tensor]) -> Tensor:
    """Decoder transition whose gates and candidate also read the latent ``z``.

    With ``z=None`` (baseline decoder) the latent term is dropped.
    """
    gx = T.add(T.matmul(y_emb, params["dec.W"]), T.matmul(c, params["dec.C"]))
    if z is not None:
        gx = T.add(gx, T.matmul(z, params["dec.V"]))
    gx = T.add_bias(gx, params["dec.b"])
    return gru_core(s, gx, params["dec.U_ru"], params["dec.U"])


def _run_direction(proj: Tensor, mask: np.ndarray, U_ru: Tensor, U: Tensor,
                   reverse: bool) -> list[Tensor]:
    B, steps, three_d = proj.shape
    s = T.constant(np.zeros((B, three_d // 3)))
    out: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        s_new = gru_core(s, T.getitem(proj, (slice(None), t)), U_ru, U)
        m = mask[:, t]
        if m.all():
            s = s_new
        else:
            # padded rows keep their previous state
            s = T.add(s, T.apply_mask(T.sub(s_new, s), m[:, None]))
        out[t] = s
    return out


def encode(src_ids, params: dict[str, Tensor], src_mask: np.ndarray | None = None,
           dropout: float = 0.0, rng: np.random.Generator | None = None) -> Annotations:
    """Bidirectional GRU encoder over a right-padded ``(B, T)`` id matrix.

    A 1-D id sequence is treated as a batch of one.
    """
    ids = np.asarray(src_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ValueError("empty source sentence")
    mask = np.ones(ids.shape) if src_mask is None else np.asarray(src_mask, dtype=np.float64)
    if not (mask[:, 0] > 0).all():
        raise ValueError("every source sentence needs at least one token")

    x = T.dropout(T.embedding(params["src_emb"], ids), dropout, rng)
    fwd = _run_direction(T.add_bias(T.matmul(x, params["enc_fwd.W"]), params["enc_fwd.b"]),
                         mask, params["enc_fwd.U_ru"], params["enc_fwd.U"], reverse=False)
    bwd = _run_direction(T.add_bias(T.matmul(x, params["enc_bwd.W"]), params["enc_bwd.b"]),
                         mask, params["enc_bwd.U_ru"], params["enc_bwd.U"], reverse=True)
    states = T.stack([T.concat([f, b]) for f, b in zip(fwd, bwd)], axis=1)
    return Annotations(states, mask)


def attention_keys(ann: Annotations, params: dict[str, Tensor]) -> Tensor:
    if ann.keys is None:
        ann.keys = T.matmul(ann.states, params["att.U_a"])
    return ann.keys


def attend(s: Tensor, ann: Annotations, params: dict[str, Tensor]) -> AttentionResult:
    """Additive attention: e_i = v_a . tanh(W_a s + U_a h_i), masked softmax, weighted sum."""
    B, steps, width = ann.states.shape
    keys = attention_keys(ann, params)
    query = T.expand(T.matmul(s, params["att.W_a"]), 1, steps)
    scores = T.matmul(T.tanh(T.add(keys, query)), params["att.v_a"])
    alpha = T.softmax(scores, mask=ann.mask)
    ctx = T.matmul(T.reshape(alpha, (B, 1, steps)), ann.states)
    return AttentionResult(T.reshape(ctx, (B, width)), alpha)


def init_decoder_state(ann: Annotations, params: dict[str, Tensor]) -> Tensor:
    """s_0 = tanh(W_init h_back + b_init) from the backward state at the first position."""
    if ann.length == 0 or not (ann.mask[:, 0] > 0).all():
        raise ValueError("empty source sentence")
    width = ann.states.shape[-1]
    h_back = T.getitem(ann.states, (slice(None), 0, slice(width // 2, width)))
    return T.tanh(T.add_bias(T.matmul(h_back, params["init.W"]), params["init.b"]))
