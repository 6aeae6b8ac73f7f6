import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vrnmt.config import ModelDims  # noqa: E402
from vrnmt.models import ModelParams  # noqa: E402


def random_model(variant, seed=0, vocab=12, d_e=5, d_h=6, d_z=3, d_a=5, scale=0.5,
                 src_vocab=None):
    """Small model with random weights (biases included) drawn at ``scale``."""
    rng = np.random.default_rng(seed)
    dims = ModelDims(src_vocab or vocab, vocab, d_e, d_h, d_z, d_a)
    params = ModelParams.initialize(variant, dims, rng)
    for t in params.tensors.values():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return params


@pytest.fixture
def make_model():
    return random_model
