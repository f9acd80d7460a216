"""
Shared pytest fixtures: small model specs and their quantized weights
"""

import os
import tempfile

# Keep test log files out of the working tree; must run before config is imported
os.environ.setdefault('COMPINFER_LOG_DIR', os.path.join(tempfile.gettempdir(), 'compinfer-test-logs'))

import numpy as np
import pytest

from quantizer import quantize
from toymodel import ModelSpec, build_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """One dense and one MoE layer at a width that keeps every forward well under a millisecond"""
    return ModelSpec(hidden=16, ffn_hidden=32, layers=('dense', 'moe'), n_experts=3, top_k=2,
                     vocab=32, seed=7, planted_rank=3)


@pytest.fixture
def tiny_model(tiny_spec):
    return build_synthetic(tiny_spec)


@pytest.fixture
def tiny_quantized(tiny_model):
    cfg = tiny_model.spec.plant_quant
    return {mid: quantize(w, cfg) for mid, w in tiny_model.weights.items()}


@pytest.fixture
def dense_model():
    return build_synthetic(ModelSpec(hidden=16, ffn_hidden=32, layers=('dense',), vocab=32, seed=3))
