"""Configuration records and the seed-to-stream expansion."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

VARIANTS = ("baseline", "vrnmt", "vrnmt_td")

# Sizes used for the large-scale experiments; desk defaults are far smaller.
PAPER_DIMS = {"d_e": 620, "d_h": 1000, "d_z": 2000, "d_a": 1000, "d_r": 1000}

STREAMS = ("init", "dropout", "epsilon", "shuffle", "bootstrap", "prior_noise")


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of baseline, vrnmt, vrnmt-td")
    return v


@dataclass
class ModelDims:
    src_vocab: int
    tgt_vocab: int
    d_e: int = 32
    d_h: int = 64
    d_z: int = 16
    d_a: int = 64
    d_r: int = 0  # 0 means "same as d_h"

    def __post_init__(self):
        if self.d_r <= 0:
            self.d_r = self.d_h
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"dimension {f.name} must be positive")


@dataclass
class TrainConfig:
    variant: str = "vrnmt"
    d_e: int = 32
    d_h: int = 64
    d_z: int = 16
    d_a: int = 64
    d_r: int = 0
    learning_rate: float = 5e-4
    rho: float = 0.95
    eps: float = 1e-4
    momentum: float = 0.0
    centered: bool = False
    clip_norm: float = 1.0
    dropout: float = 0.3
    batch_size: int = 80
    samples: int = 1
    max_len: int = 50
    epochs: int = 10
    seed: int = 1234
    kl_anneal: int = 0
    prior_noise: bool = False
    orthogonal_init: bool = False
    beam: int = 10
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 < self.rho < 1.0 or self.eps <= 0:
            raise ValueError("rho must lie in (0, 1) and eps must be positive")
        for name in ("batch_size", "samples", "max_len", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def dims(self, src_vocab: int, tgt_vocab: int) -> ModelDims:
        return ModelDims(src_vocab, tgt_vocab, self.d_e, self.d_h, self.d_z, self.d_a, self.d_r)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each random purpose, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}
