"""Baseline attentional NMT, VRNMT and VRNMT(-TD) forward passes.

Per target step j the decoder state ``s`` has already consumed y_{j-1}:

1. c_j from attention over the annotations using s;
2. posterior (train only) and prior Gaussians over z_j;
3. z_j: a posterior sample when training, the prior mean when decoding;
4. log p(y_j | ...) from the readout over [y_{j-1}; s; c_j; z_j];
5. the next state from the latent-augmented GRU fed with y_j.

The baseline is the same pipeline with every latent term removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelDims, TrainConfig, normalize_variant
from .data import BOS, EOS, PAD, Checkpoint, FormatError, load_checkpoint, save_checkpoint
from .layers import (
    Annotations,
    AttentionResult,
    attend,
    attention_keys,
    encode,
    init_decoder_state,
    variational_gru_step,
)
from .tensor import Tensor
from .variational import (
    GaussianParams,
    LatentSample,
    kl_diag_gaussians,
    posterior_params,
    prior_params,
    reparameterize,
)

INIT_SCALE = 0.08

RECURRENT = ("enc_fwd.U_ru", "enc_fwd.U", "enc_bwd.U_ru", "enc_bwd.U", "dec.U_ru", "dec.U")
LATENT_PATH = ("dec.V", "out.W_dz")


def parameter_shapes(variant: str, dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """The exact tensor inventory of a variant."""
    variant = normalize_variant(variant)
    e, h, z, a, r = dims.d_e, dims.d_h, dims.d_z, dims.d_a, dims.d_r
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (dims.src_vocab, e),
        "tgt_emb": (dims.tgt_vocab, e),
    }
    for d in ("enc_fwd", "enc_bwd"):
        shapes.update({f"{d}.W": (e, 3 * h), f"{d}.U_ru": (h, 2 * h),
                       f"{d}.U": (h, h), f"{d}.b": (3 * h,)})
    shapes.update({
        "att.W_a": (h, a), "att.U_a": (2 * h, a), "att.v_a": (a,),
        "init.W": (h, h), "init.b": (h,),
        "dec.W": (e, 3 * h), "dec.U_ru": (h, 2 * h), "dec.U": (h, h),
        "dec.C": (2 * h, 3 * h), "dec.b": (3 * h,),
        "out.W_d": (e + h + 2 * h, r), "out.b_d": (r,),
        "out.W_out": (r, dims.tgt_vocab), "out.b_out": (dims.tgt_vocab,),
    })
    if variant == "baseline":
        return shapes
    shapes.update({"dec.V": (z, 3 * h), "out.W_dz": (z, r)})
    post_in = e + h + 2 * h + e if variant == "vrnmt" else e
    shapes.update({"post.W_z": (post_in, z), "post.b_z": (z,),
                   "post.W_mu": (z, z), "post.b_mu": (z,),
                   "post.W_sigma": (z, z), "post.b_sigma": (z,)})
    if variant == "vrnmt":
        shapes.update({"prior.W_z": (e + h + 2 * h, z), "prior.b_z": (z,),
                       "prior.W_mu": (z, z), "prior.b_mu": (z,),
                       "prior.W_sigma": (z, z), "prior.b_sigma": (z,)})
    return shapes


def _init_array(name: str, shape, rng: np.random.Generator, orthogonal: bool) -> np.ndarray:
    if len(shape) == 1 and name != "att.v_a":
        return np.zeros(shape)
    if orthogonal and name in RECURRENT:
        h = shape[0]
        blocks = []
        for _ in range(shape[1] // h):
            q, _ = np.linalg.qr(rng.standard_normal((h, h)))
            blocks.append(q)
        return np.concatenate(blocks, axis=1)
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


@dataclass
class ModelParams:
    variant: str
    dims: ModelDims
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, variant: str, dims: ModelDims, rng: np.random.Generator,
                   orthogonal: bool = False) -> "ModelParams":
        variant = normalize_variant(variant)
        tensors = {name: T.parameter(_init_array(name, shape, rng, orthogonal), name=name)
                   for name, shape in parameter_shapes(variant, dims).items()}
        return cls(variant, dims, tensors)

    @property
    def latent(self) -> bool:
        return self.variant != "baseline"

    @property
    def temporal(self) -> bool:
        return self.variant == "vrnmt"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.dims,
                           {k: T.parameter(v.data.copy(), name=k) for k, v in self.tensors.items()})

    def check(self) -> None:
        expected = parameter_shapes(self.variant, self.dims)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def zero_latent_path(self) -> None:
        """Zero V, the z block of the readout and both inference networks."""
        for name, t in self.tensors.items():
            if name in LATENT_PATH or name.startswith(("post.", "prior.")):
                t.data[...] = 0.0


@dataclass
class StepOutput:
    log_probs: Tensor  # (B, V)
    state: Tensor | None  # next decoder state (None until the emitted token is known)
    attention: AttentionResult
    prior: GaussianParams | None
    posterior: GaussianParams | None = None
    latent: LatentSample | None = None
    kl: Tensor | None = None  # (B,)
    input_state: Tensor | None = None


@dataclass
class ObjectiveTerms:
    nll: Tensor  # summed negative log-likelihood (scalar)
    kl: Tensor  # summed KL (scalar)
    elbo: Tensor  # -nll - kl
    tokens: int


def _check_ids(ids: np.ndarray, vocab: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")


def output_distribution(y_prev_emb: Tensor, s: Tensor, c: Tensor, z: Tensor | None,
                        params: ModelParams, dropout: float = 0.0,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Log-probabilities over the target vocabulary (readout + projection)."""
    pre = T.matmul(T.concat([y_prev_emb, s, c]), params["out.W_d"])
    if z is not None:
        pre = T.add(pre, T.matmul(z, params["out.W_dz"]))
    hidden = T.tanh(T.add_bias(pre, params["out.b_d"]))
    hidden = T.dropout(hidden, dropout, rng)
    logits = T.add_bias(T.matmul(hidden, params["out.W_out"]), params["out.b_out"])
    return T.log_softmax(logits)


def decode_step_train(ann: Annotations, y_prev_emb: Tensor, y_gold_emb: Tensor, s: Tensor,
                      params: ModelParams, epsilon: np.ndarray | None,
                      dropout: float = 0.0, rng: np.random.Generator | None = None) -> StepOutput:
    """One teacher-forced step; ``epsilon=None`` uses the posterior mean."""
    att = attend(s, ann, params.tensors)
    c = att.context
    if not params.latent:
        logp = output_distribution(y_prev_emb, s, c, None, params, dropout, rng)
        nxt = variational_gru_step(y_gold_emb, s, c, None, params.tensors)
        return StepOutput(logp, nxt, att, None, input_state=s)
    post = posterior_params(y_prev_emb, s, c, y_gold_emb, params.tensors, params.temporal)
    prior = prior_params(y_prev_emb, s, c, params.tensors, params.temporal)
    sample = reparameterize(post, epsilon)
    logp = output_distribution(y_prev_emb, s, c, sample.z, params, dropout, rng)
    nxt = variational_gru_step(y_gold_emb, s, c, sample.z, params.tensors)
    kl = kl_diag_gaussians(post, prior)
    return StepOutput(logp, nxt, att, prior, post, sample, kl, input_state=s)


def decode_step_infer(ann: Annotations, y_prev_ids, s: Tensor, params: ModelParams,
                      prior_noise: np.random.Generator | None = None,
                      y_emit_ids=None) -> StepOutput:
    """One step without the gold word: z is the prior mean (or a prior sample).

    The returned ``state`` is only meaningful when ``y_emit_ids`` (the token
    actually emitted at this step) is given; otherwise use :func:`advance`.
    """
    y_prev = np.asarray(y_prev_ids, dtype=np.int64)
    _check_ids(y_prev, params.dims.tgt_vocab)
    y_prev_emb = T.embedding(params["tgt_emb"], y_prev)
    att = attend(s, ann, params.tensors)
    c = att.context
    prior = None
    latent = None
    z = None
    if params.latent:
        prior = prior_params(y_prev_emb, s, c, params.tensors, params.temporal)
        eps = None
        if prior_noise is not None:
            eps = prior_noise.standard_normal(prior.mu.shape)
        latent = reparameterize(prior, eps)
        z = latent.z
    logp = output_distribution(y_prev_emb, s, c, z, params)
    out = StepOutput(logp, None, att, prior, latent=latent, input_state=s)
    if y_emit_ids is not None:
        out.state = advance(out, y_emit_ids, params)
    return out


def advance(step: StepOutput, y_emit_ids, params: ModelParams) -> Tensor:
    """Next decoder state after emitting ``y_emit_ids`` from ``step``."""
    y = np.asarray(y_emit_ids, dtype=np.int64)
    _check_ids(y, params.dims.tgt_vocab)
    z = step.latent.z if step.latent is not None else None
    return variational_gru_step(T.embedding(params["tgt_emb"], y), step.input_state,
                                step.attention.context, z, params.tensors)


def start_state(src_ids, params: ModelParams, src_mask=None, dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[Annotations, Tensor]:
    ids = np.asarray(src_ids, dtype=np.int64)
    _check_ids(ids, params.dims.src_vocab)
    ann = encode(ids, params.tensors, src_mask, dropout, rng)
    attention_keys(ann, params.tensors)
    return ann, init_decoder_state(ann, params.tensors)


def frame_targets(tgt_ids: np.ndarray, tgt_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Previous-token inputs (BOS-shifted) for gold targets that already end in EOS."""
    prev = np.empty_like(tgt_ids)
    prev[:, 0] = BOS
    prev[:, 1:] = tgt_ids[:, :-1]
    prev[:, 1:][tgt_mask[:, 1:] == 0] = PAD
    return prev, tgt_ids


def batch_objective(src_ids: np.ndarray, src_mask: np.ndarray, tgt_ids: np.ndarray,
                    tgt_mask: np.ndarray, params: ModelParams, noise=None,
                    dropout: float = 0.0, rng: np.random.Generator | None = None,
                    kl_weight: float = 1.0) -> ObjectiveTerms:
    """Summed nll and KL over a padded batch.

    ``noise`` is either a generator (fresh standard-normal draws), an array of
    shape ``(T_y, B, d_z)`` holding fixed draws, or None for posterior means.
    ``kl_weight`` only scales the KL inside ``elbo``; ``kl`` stays unweighted.
    """
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    _check_ids(tgt_ids, params.dims.tgt_vocab)
    tgt_mask = np.asarray(tgt_mask, dtype=np.float64)
    B, steps = tgt_ids.shape
    ann, s = start_state(src_ids, params, src_mask, dropout, rng)
    prev_ids, gold_ids = frame_targets(tgt_ids, tgt_mask)
    emb = params["tgt_emb"]
    prev_emb = T.dropout(T.embedding(emb, prev_ids), dropout, rng)
    gold_emb = T.dropout(T.embedding(emb, gold_ids), dropout, rng)
    onehot = np.zeros((B, steps, params.dims.tgt_vocab))
    onehot[np.arange(B)[:, None], np.arange(steps)[None, :], gold_ids] = 1.0
    onehot *= tgt_mask[:, :, None]

    nll_terms, kl_terms = [], []
    for j in range(steps):
        eps = None
        if params.latent:
            if isinstance(noise, np.random.Generator):
                eps = noise.standard_normal((B, params.dims.d_z))
            elif noise is not None:
                eps = np.asarray(noise)[j]
        out = decode_step_train(ann, T.getitem(prev_emb, (slice(None), j)),
                                T.getitem(gold_emb, (slice(None), j)), s, params, eps,
                                dropout, rng)
        nll_terms.append(T.sum(T.apply_mask(out.log_probs, onehot[:, j])))
        if out.kl is not None:
            kl_terms.append(T.sum(T.apply_mask(out.kl, tgt_mask[:, j])))
        s = out.state

    nll = T.scale(_sum_all(nll_terms), -1.0)
    kl = _sum_all(kl_terms) if kl_terms else T.constant(0.0)
    weighted = kl if kl_weight == 1.0 else T.scale(kl, kl_weight)
    if kl_terms:
        elbo = T.scale(T.add(nll, weighted), -1.0)
    else:
        elbo = T.scale(nll, -1.0)
    return ObjectiveTerms(nll, kl, elbo, int(tgt_mask.sum()))


def _sum_all(terms: list[Tensor]) -> Tensor:
    return T.sum(T.stack(terms, axis=0))


def sentence_objective(x, y, params: ModelParams, config: TrainConfig | None = None,
                       noise=None, rng: np.random.Generator | None = None) -> ObjectiveTerms:
    """Per-sentence objective for one pair; ``y`` must not contain EOS.

    With ``samples = L > 1`` the sentence is replicated L times, each copy
    with its own noise path, and every term is averaged over the copies.
    ``noise`` follows :func:`batch_objective` (fixed arrays have shape
    ``(T_y + 1, L, d_z)``).
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.size == 0 or y.size == 0:
        raise ValueError("source and target must be non-empty")
    samples = config.samples if config is not None else 1
    dropout = config.dropout if config is not None and rng is not None else 0.0
    if config is not None and (x.size > config.max_len or y.size > config.max_len):
        raise ValueError(f"sentence longer than max_len={config.max_len}")
    tgt = np.append(y, EOS)
    src_ids = np.repeat(x[None, :], samples, axis=0)
    tgt_ids = np.repeat(tgt[None, :], samples, axis=0)
    terms = batch_objective(src_ids, np.ones(src_ids.shape), tgt_ids, np.ones(tgt_ids.shape),
                            params, noise, dropout, rng)
    if samples == 1:
        return terms
    inv = 1.0 / samples
    nll, kl = T.scale(terms.nll, inv), T.scale(terms.kl, inv)
    elbo = T.scale(T.add(nll, kl), -1.0) if params.latent else T.scale(nll, -1.0)
    return ObjectiveTerms(nll, kl, elbo, tgt.size)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

DIM_KEYS = ("src_vocab", "tgt_vocab", "d_e", "d_h", "d_z", "d_a", "d_r")


def save_model(path, params: ModelParams, extra: dict | None = None,
               optimizer: dict[str, np.ndarray] | None = None) -> None:
    config = {k: getattr(params.dims, k) for k in DIM_KEYS}
    config.update(extra or {})
    save_checkpoint(path, params.variant, config, params.arrays(), optimizer)


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    try:
        dims = ModelDims(**{k: int(ckpt.config[k]) for k in DIM_KEYS})
    except KeyError as exc:
        raise FormatError(f"checkpoint config lacks {exc.args[0]!r}") from None
    params = ModelParams(normalize_variant(ckpt.variant), dims,
                         {k: T.parameter(v.copy(), name=k) for k, v in ckpt.tensors.items()})
    try:
        params.check()
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return params


def load_model(path) -> ModelParams:
    return model_from_checkpoint(load_checkpoint(path))


def warm_start(target: ModelParams, source: ModelParams | Checkpoint) -> list[str]:
    """Copy every name-matched tensor from ``source`` into ``target``.

    Returns the names left at their fresh initialization. A name present in
    both with different shapes is an error listing every such tensor.
    """
    arrays = source.tensors if isinstance(source, Checkpoint) else source.arrays()
    bad = [f"{k}: {np.shape(arrays[k])} vs {t.shape}" for k, t in target.tensors.items()
           if k in arrays and np.shape(arrays[k]) != t.shape]
    if bad:
        raise FormatError("shape mismatch for " + "; ".join(bad))
    fresh = []
    for name, t in target.tensors.items():
        if name in arrays:
            t.data[...] = arrays[name]
        else:
            fresh.append(name)
    return fresh
