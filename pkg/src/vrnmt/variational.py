"""Posterior and prior inference networks over the per-step latent variable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_VAR_MIN = -8.0
LOG_VAR_MAX = 8.0


@dataclass
class GaussianParams:
    """Diagonal Gaussian with rows of means and log-variances."""

    mu: Tensor
    log_var: Tensor

    @classmethod
    def standard(cls, batch: int, d_z: int) -> "GaussianParams":
        return cls(T.constant(np.zeros((batch, d_z))), T.constant(np.zeros((batch, d_z))))


@dataclass
class LatentSample:
    z: Tensor
    epsilon: np.ndarray | None  # None in deterministic (mean) mode


def _gaussian_head(inputs: Tensor, params: dict[str, Tensor], prefix: str) -> GaussianParams:
    h = T.tanh(T.add_bias(T.matmul(inputs, params[f"{prefix}.W_z"]), params[f"{prefix}.b_z"]))
    mu = T.add_bias(T.matmul(h, params[f"{prefix}.W_mu"]), params[f"{prefix}.b_mu"])
    lv = T.add_bias(T.matmul(h, params[f"{prefix}.W_sigma"]), params[f"{prefix}.b_sigma"])
    return GaussianParams(mu, T.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX))


def posterior_params(y_prev_emb: Tensor, s: Tensor, c: Tensor, y_emb: Tensor,
                     params: dict[str, Tensor], temporal: bool = True) -> GaussianParams:
    """q(z_j | x, y_<=j). Without temporal dependencies the network only sees y_j."""
    if temporal:
        inputs = T.concat([y_prev_emb, s, c, y_emb])
    else:
        inputs = y_emb
    return _gaussian_head(inputs, params, "post")


def prior_params(y_prev_emb: Tensor, s: Tensor, c: Tensor, params: dict[str, Tensor],
                 temporal: bool = True) -> GaussianParams:
    """p(z_j | x, y_<j); the standard normal when temporal dependencies are removed."""
    if not temporal:
        return GaussianParams.standard(s.shape[0], params["post.W_mu"].shape[1])
    return _gaussian_head(T.concat([y_prev_emb, s, c]), params, "prior")


def reparameterize(g: GaussianParams, epsilon: np.ndarray | None) -> LatentSample:
    """z = mu + exp(log_var / 2) * eps; ``epsilon=None`` returns the mean."""
    if epsilon is None:
        return LatentSample(g.mu, None)
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.shape != g.mu.shape:
        raise ValueError(f"noise shape {eps.shape} does not match {g.mu.shape}")
    sigma = T.exp(T.scale(g.log_var, 0.5))
    return LatentSample(T.add(g.mu, T.apply_mask(sigma, eps)), eps)


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) per row, summed over latent coordinates. Shape ``(B,)``.

    Per coordinate: ((var_q + (mu_q - mu_p)^2) / var_p - 1 + log var_p - log var_q) / 2.
    """
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"latent size mismatch {q.mu.shape} vs {p.mu.shape}")
    # expm1(d) - d >= 0 term by term, so rounding can never push KL below zero
    d = T.sub(q.log_var, p.log_var)
    diff = T.sub(q.mu, p.mu)
    mahal = T.mul(T.mul(diff, diff), T.exp(T.scale(p.log_var, -1.0)))
    inner = T.add(T.sub(T.expm1(d), d), mahal)
    return T.scale(T.sum(inner, axis=-1), 0.5)
