"""Greedy and beam decoding, rescoring, and attention-based forced alignment.

Decoding never records a tape. PAD and BOS are never emitted; every other
target id (UNK and EOS included) is a candidate at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD
from .layers import Annotations, AttentionResult
from .models import ModelParams, StepOutput, advance, decode_step_infer, start_state
from .variational import LatentSample


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    attention: list[np.ndarray] = field(default_factory=list)
    state: np.ndarray | None = None

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def sort_key(self):
        return (-self.score, self.tokens)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def _tile(ann: Annotations, k: int) -> Annotations:
    keys = None if ann.keys is None else T.constant(np.repeat(ann.keys.data, k, axis=0))
    return Annotations(T.constant(np.repeat(ann.states.data, k, axis=0)),
                       np.repeat(ann.mask, k, axis=0), keys)


def _emittable(log_probs: np.ndarray) -> np.ndarray:
    out = log_probs.copy()
    out[..., PAD] = -np.inf
    out[..., BOS] = -np.inf
    return out


def greedy_decode(params: ModelParams, src_ids, max_out_len: int | None = None,
                  prior_noise: np.random.Generator | None = None) -> Hypothesis:
    """Repeated argmax; ties go to the smallest token id.

    ``prior_noise`` samples z from the prior instead of using its mean.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise ValueError("empty source sentence")
    max_out_len = max_out_len or default_max_len(src_ids.size)
    ann, s = start_state(src_ids, params)
    prev = BOS
    tokens, score, atts = [], 0.0, []
    for _ in range(max_out_len):
        step = decode_step_infer(ann, [prev], s, params, prior_noise)
        lp = _emittable(step.log_probs.data[0])
        tok = int(np.argmax(lp))
        tokens.append(tok)
        score += float(lp[tok])
        atts.append(step.attention.weights.data[0].copy())
        if tok == EOS:
            break
        s = advance(step, [tok], params)
        prev = tok
    return Hypothesis(tuple(tokens), score, atts)


def beam_search(params: ModelParams, src_ids, beam_size: int = 10,
                max_out_len: int | None = None, length_norm: bool = False,
                prior_noise: np.random.Generator | None = None) -> list[Hypothesis]:
    """Beam search by accumulated log-probability.

    At each step the live hypotheses are expanded over the vocabulary and the
    best ``beam_size - len(completed)`` candidates survive; candidates ending
    in EOS move to the completed pool. Search stops once ``beam_size``
    hypotheses are complete, no live ones remain, or ``max_out_len`` tokens
    have been produced (live hypotheses are then returned unfinished).
    Ranking uses the score, then the token sequence (smaller ids first).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise ValueError("empty source sentence")
    max_out_len = max_out_len or default_max_len(src_ids.size)
    ann, s0 = start_state(src_ids, params)
    live = [Hypothesis((), 0.0, [], s0.data[0])]
    completed: list[Hypothesis] = []

    for _ in range(max_out_len):
        k = len(live)
        tiled = _tile(ann, k)
        prev = [h.tokens[-1] if h.tokens else BOS for h in live]
        states = T.constant(np.stack([h.state for h in live]))
        step = decode_step_infer(tiled, prev, states, params, prior_noise)
        lp = _emittable(step.log_probs.data)
        alpha = step.attention.weights.data
        vocab = lp.shape[1]

        cand_scores = (np.array([h.score for h in live])[:, None] + lp).ravel()
        room = beam_size - len(completed)
        finite = np.flatnonzero(np.isfinite(cand_scores))
        if finite.size > room:
            # keep everything tied with the room-th best so tie-breaking stays exact
            cutoff = -np.partition(-cand_scores[finite], room - 1)[room - 1]
            finite = finite[cand_scores[finite] >= cutoff]
        ranked = sorted(finite.tolist(), key=lambda c: (-cand_scores[c], live[c // vocab].tokens,
                                                        c % vocab))
        chosen = ranked[:room]
        survivors, rows, toks = [], [], []
        for c in chosen:
            h, tok = live[c // vocab], int(c % vocab)
            hyp = Hypothesis(h.tokens + (tok,), float(cand_scores[c]),
                             h.attention + [alpha[c // vocab].copy()])
            if tok == EOS:
                completed.append(hyp)
            else:
                survivors.append(hyp)
                rows.append(c // vocab)
                toks.append(tok)
        if survivors:
            # advance only the rows that survived
            sub = _select_step(step, rows)
            nxt = advance(sub, toks, params).data
            for hyp, st in zip(survivors, nxt):
                hyp.state = st
        live = survivors
        if len(completed) >= beam_size or not live:
            break
    else:
        completed.extend(live)
    if not completed:
        completed = live

    def key(h: Hypothesis):
        sc = h.score / max(1, len(h.tokens)) if length_norm else h.score
        return (-sc, h.tokens)

    return sorted(completed, key=key)


def _select_step(step: StepOutput, rows) -> StepOutput:
    idx = np.asarray(rows)
    latent = None
    if step.latent is not None:
        latent = LatentSample(T.constant(step.latent.z.data[idx]), None)
    att = AttentionResult(T.constant(step.attention.context.data[idx]),
                          T.constant(step.attention.weights.data[idx]))
    return StepOutput(T.constant(step.log_probs.data[idx]), None, att, None,
                      latent=latent, input_state=T.constant(step.input_state.data[idx]))


def score_sequence(params: ModelParams, src_ids, tokens) -> float:
    """Total log-probability of ``tokens`` under step-by-step inference decoding."""
    ann, s = start_state(np.asarray(src_ids, dtype=np.int64), params)
    prev, total = BOS, 0.0
    for tok in tokens:
        step = decode_step_infer(ann, [prev], s, params)
        total += float(step.log_probs.data[0, tok])
        s = advance(step, [tok], params)
        prev = tok
    return total


def force_decode_alignments(params: ModelParams, src_ids, ref_ids) -> list[tuple[int, int]]:
    """Feed the reference through the decoder and link each target word to its
    most attended source position (smallest index on ties). EOS gets no link.
    """
    ref = [int(t) for t in ref_ids]
    if not ref:
        raise ValueError("empty reference")
    ann, s = start_state(np.asarray(src_ids, dtype=np.int64), params)
    prev = BOS
    links = []
    for j, tok in enumerate(ref):
        if tok == EOS:
            break
        step = decode_step_infer(ann, [prev], s, params)
        alpha = step.attention.weights.data[0]
        links.append((int(np.argmax(alpha)), j))
        s = advance(step, [tok], params)
        prev = tok
    return links


def translate_corpus(params: ModelParams, sources, beam_size: int = 10,
                     max_out_len: int | None = None) -> list[list[int]]:
    out = []
    for src in sources:
        if beam_size == 1:
            hyp = greedy_decode(params, src, max_out_len)
        else:
            hyp = beam_search(params, src, beam_size, max_out_len)[0]
        out.append([t for t in hyp.tokens if t != EOS])
    return out
