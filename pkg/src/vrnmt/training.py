"""Minibatching, RMSProp with global-norm clipping, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig, rng_streams
from .data import EOS, PAD, ParallelCorpus, Vocabulary
from .models import ModelParams, batch_objective, save_model
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class Batch:
    src: np.ndarray  # (B, T_x) ids, right-padded
    src_mask: np.ndarray
    tgt: np.ndarray  # (B, T_y + 1) ids ending in EOS, right-padded
    tgt_mask: np.ndarray
    indices: np.ndarray  # positions in the filtered corpus

    @property
    def size(self) -> int:
        return self.src.shape[0]


@dataclass
class RMSPropState:
    mean_square: dict[str, np.ndarray] = field(default_factory=dict)
    mean_grad: dict[str, np.ndarray] = field(default_factory=dict)
    delta: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"n/{k}": v for k, v in self.mean_square.items()}
        out.update({f"g/{k}": v for k, v in self.mean_grad.items()})
        out.update({f"d/{k}": v for k, v in self.delta.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "RMSPropState":
        st = cls()
        slots = {"n": st.mean_square, "g": st.mean_grad, "d": st.delta}
        for key, arr in arrays.items():
            slot, name = key.split("/", 1)
            slots[slot][name] = arr.copy()
        return st


def rmsprop_update(params: dict[str, T.Tensor], grads: dict[str, np.ndarray],
                   state: RMSPropState, config: TrainConfig) -> RMSPropState:
    """One in-place RMSProp step.

    n <- rho*n + (1-rho)*g^2; delta <- momentum*delta - lr*g/sqrt(n + eps).
    With ``config.centered`` the running mean gradient is subtracted inside the
    square root (the Graves formulation). The whole step is rejected, before
    anything is modified, if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    rho, lr, eps, mom = config.rho, config.learning_rate, config.eps, config.momentum
    for name, g in grads.items():
        n = state.mean_square.get(name)
        n = (1.0 - rho) * g * g if n is None else rho * n + (1.0 - rho) * g * g
        state.mean_square[name] = n
        denom = n
        if config.centered:
            m = state.mean_grad.get(name)
            m = (1.0 - rho) * g if m is None else rho * m + (1.0 - rho) * g
            state.mean_grad[name] = m
            denom = n - m * m
        step = -lr * g / np.sqrt(denom + eps)
        if mom:
            prev = state.delta.get(name)
            if prev is not None:
                step = mom * prev + step
            state.delta[name] = step
        params[name].data += step
    state.steps += 1
    return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def encode_corpus(corpus: ParallelCorpus, src_vocab: Vocabulary,
                  tgt_vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(src_vocab.encode(s), tgt_vocab.encode(t))
            for s, t in zip(corpus.source, corpus.target)]


def pad_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], indices) -> Batch:
    B = len(pairs)
    tx = max(len(s) for s, _ in pairs)
    ty = max(len(t) for _, t in pairs) + 1
    src = np.full((B, tx), PAD, dtype=np.int64)
    tgt = np.full((B, ty), PAD, dtype=np.int64)
    sm = np.zeros((B, tx))
    tm = np.zeros((B, ty))
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = s
        sm[b, :len(s)] = 1.0
        tgt[b, :len(t)] = t
        tgt[b, len(t)] = EOS
        tm[b, :len(t) + 1] = 1.0
    return Batch(src, sm, tgt, tm, np.asarray(indices))


def make_batches(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], config: TrainConfig,
                 rng: np.random.Generator | int) -> list[Batch]:
    """Length-filter, shuffle, bucket by target length, pad.

    Pairs are shuffled, cut into pools of 20 batches, each pool is sorted by
    target length and sliced into batches, and the batch order is shuffled
    again. Every surviving pair lands in exactly one batch.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = [i for i, (s, t) in enumerate(pairs)
            if 0 < len(s) <= config.max_len and 0 < len(t) <= config.max_len]
    if not keep:
        raise ValueError("no sentence pairs left after length filtering")
    order = [keep[k] for k in rng.permutation(len(keep))]
    pool = config.batch_size * 20
    groups: list[list[int]] = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool], key=lambda i: len(pairs[i][1]))
        groups += [chunk[k:k + config.batch_size] for k in range(0, len(chunk), config.batch_size)]
    batches = [pad_batch([pairs[i] for i in g], g) for g in groups]
    return [batches[k] for k in rng.permutation(len(batches))]


@dataclass
class EpochRecord:
    epoch: int
    train_neg_elbo: float
    valid_nll: float
    valid_kl: float
    seconds: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.train_neg_elbo:.6f}\t{self.valid_nll:.6f}"
                f"\t{self.valid_kl:.6f}\t{self.seconds:.2f}")


def read_log(path) -> list[EpochRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        e, tr, vn, vk, sec = line.split("\t")
        out.append(EpochRecord(int(e), float(tr), float(vn), float(vk), float(sec)))
    return out


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list[EpochRecord]
    losses: list[float]  # per-update training loss (per token)
    optimizer: RMSPropState


def evaluate_loss(params: ModelParams, pairs, batch_size: int = 64,
                  max_len: int = 50) -> tuple[float, float]:
    """Per-token nll and KL with latent means (no sampling, no dropout)."""
    if not pairs:
        return float("nan"), float("nan")
    cfg = TrainConfig(variant=params.variant, batch_size=batch_size, max_len=max_len)
    nll = kl = 0.0
    tokens = 0
    for b in make_batches(pairs, cfg, 0):
        terms = batch_objective(b.src, b.src_mask, b.tgt, b.tgt_mask, params, None)
        nll += terms.nll.item()
        kl += terms.kl.item()
        tokens += terms.tokens
    return nll / tokens, kl / tokens


def train_step(params: ModelParams, batch: Batch, config: TrainConfig, state: RMSPropState,
               streams: dict[str, np.random.Generator], kl_weight: float = 1.0) -> float:
    """Forward, backward, clip, update. Returns the per-token training loss."""
    with T.Tape() as tape:
        terms = batch_objective(batch.src, batch.src_mask, batch.tgt, batch.tgt_mask, params,
                                streams["epsilon"], config.dropout, streams["dropout"],
                                kl_weight)
        loss = T.scale(terms.elbo, -1.0 / terms.tokens)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} (nll={terms.nll.item()}, kl={terms.kl.item()})")
    params.zero_grad()
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in params.tensors.items()}
    grads, _ = clip_gradients(grads, config.clip_norm)
    rmsprop_update(params.tensors, grads, state, config)
    return value


def train(params: ModelParams, train_pairs, valid_pairs, config: TrainConfig,
          log_path=None, checkpoint_dir=None, extra_config: dict | None = None,
          state: RMSPropState | None = None) -> TrainResult:
    """Epoch loop; keeps the parameters with the best validation nll.

    ``train_pairs`` / ``valid_pairs`` are id-encoded (source, target) pairs
    without EOS. Writes one tab-separated line per epoch to ``log_path``
    and ``best.ckpt`` / ``last.ckpt`` into ``checkpoint_dir`` when given.
    """
    streams = rng_streams(config.seed)
    state = state or RMSPropState()
    history: list[EpochRecord] = []
    losses: list[float] = []
    best = params.copy()
    best_nll = math.inf
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("", encoding="utf-8")

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(train_pairs, config, streams["shuffle"])
        total = 0.0
        tokens = 0
        for k, batch in enumerate(batches):
            beta = 1.0
            if config.kl_anneal > 0:
                beta = min(1.0, (state.steps + 1) / config.kl_anneal)
            try:
                value = train_step(params, batch, config, state, streams, beta)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {k}: {exc}") from None
            losses.append(value)
            n = int(batch.tgt_mask.sum())
            total += value * n
            tokens += n
        vnll, vkl = evaluate_loss(params, valid_pairs, max_len=config.max_len)
        rec = EpochRecord(epoch, total / tokens, vnll, vkl, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d  train %.4f  valid nll %.4f  kl %.4f  (%.1fs)", epoch,
                 rec.train_neg_elbo, vnll, vkl, rec.seconds)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.line() + "\n")
        if not valid_pairs or vnll < best_nll:
            best_nll = vnll
            best = params.copy()
            if checkpoint_dir is not None:
                save_model(Path(checkpoint_dir) / "best.ckpt", best, extra_config)
        if checkpoint_dir is not None:
            save_model(Path(checkpoint_dir) / "last.ckpt", params, extra_config, state.arrays())
    return TrainResult(params, best, history, losses, state)
