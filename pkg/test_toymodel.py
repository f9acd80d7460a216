#!/usr/bin/env python3
"""
Tests for the synthetic model: ids, determinism, routing and the reference forwards
"""

import numpy as np
import pytest

from compensator import build_factor_pool
from errors import ConfigError, ShapeError
from quantizer import QuantConfig, quantize, residual
from sensitivity import distribution_from_logits, kl_divergence
from toymodel import (
    MatrixId,
    ModelSpec,
    ToyModel,
    WindowKind,
    build_synthetic,
    forward_compensated_sequential,
    forward_full,
    forward_quantized,
    route_logits,
    router,
    routing_statistics,
)


class TestMatrixId:

    def test_parse_and_format(self):
        for text in ('L0.ATT_QKV.q', 'L12.FFN_DOWN.down.e3', 'L1.FFN_UPGATE.gate.e0'):
            assert str(MatrixId.parse(text)) == text
        assert MatrixId.parse('L2.ATT_O.o').window_id == 'L2.ATT_O'

    def test_rejects_malformed(self):
        with pytest.raises(ConfigError):
            MatrixId.parse('L0.ATT_QKV')
        with pytest.raises(ConfigError):
            MatrixId.parse('L0.ATT_O.q')

    def test_ordering_follows_schedule(self):
        ids = [MatrixId.parse(t) for t in ('L1.ATT_QKV.q', 'L0.FFN_DOWN.down', 'L0.ATT_QKV.v', 'L0.ATT_QKV.q')]
        assert [str(m) for m in sorted(ids)] == ['L0.ATT_QKV.q', 'L0.ATT_QKV.v', 'L0.FFN_DOWN.down', 'L1.ATT_QKV.q']


class TestModelSpec:

    def test_default_matrix_inventory(self):
        spec = ModelSpec()
        # 7 per dense layer; MoE layer shares attention and has up/gate/down per expert
        assert len(spec.matrix_ids()) == 2 * 7 + 4 + 3 * 4
        assert spec.matrix_shape('up') == (64, 128)
        assert spec.matrix_shape('down') == (128, 64)

    @pytest.mark.parametrize('field,value', [
        ('top_k', 5), ('hidden', 1), ('layers', ('dense', 'conv')), ('planted_rank', 40), ('seed', -1),
    ])
    def test_invalid_fields_are_named(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ModelSpec(**{field: value}).validate()


def test_build_is_deterministic():
    a = build_synthetic(ModelSpec(layers=('dense',), seed=4))
    b = build_synthetic(ModelSpec(layers=('dense',), seed=4))
    c = build_synthetic(ModelSpec(layers=('dense',), seed=5))
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert all(w.dtype == np.float32 for w in a.weights.values())


def test_empty_model_is_identity_plus_head():
    spec = ModelSpec(layers=())
    model = build_synthetic(spec)
    x = model.embed[:2].astype(np.float64)
    h, logits = forward_full(model, x)
    assert np.array_equal(h, x)
    assert logits.shape == (2, spec.vocab)


class TestRouter:

    def test_hand_example(self):
        out = route_logits(np.array([2.0, 1.0, 0.0]), 2)
        assert out.activated == (0, 1)
        assert np.allclose(out.gates, [0.7311, 0.2689], atol=1e-4)
        assert out.gate(1) == pytest.approx(0.2689, abs=1e-4)

    def test_all_experts_activated(self):
        logits = np.array([0.3, -1.0, 2.0])
        out = route_logits(logits, 3)
        p = np.exp(logits) / np.exp(logits).sum()
        assert out.activated == (0, 1, 2)
        assert np.allclose(out.gates, p)

    def test_ties_prefer_lower_index(self):
        out = route_logits(np.zeros(4), 2)
        assert out.activated == (0, 1)
        assert np.allclose(out.gates, [0.5, 0.5])

    def test_router_checks(self, tiny_model):
        with pytest.raises(ConfigError):
            router(tiny_model, 0, np.zeros(tiny_model.spec.hidden))
        with pytest.raises(ShapeError):
            router(tiny_model, 1, np.zeros(tiny_model.spec.hidden + 1))
        out = router(tiny_model, 1, np.ones(tiny_model.spec.hidden))
        assert len(out.activated) == tiny_model.spec.top_k
        assert out.gates.sum() == pytest.approx(1.0)

    def test_routing_statistics(self, tiny_model, rng):
        gates = routing_statistics(tiny_model, [rng.standard_normal((6, tiny_model.spec.hidden))])
        assert set(gates) == {1}
        assert gates[1].shape == (tiny_model.spec.n_experts,)
        assert gates[1].sum() == pytest.approx(1.0)


class TestForwards:

    def test_shape_check(self, tiny_model):
        with pytest.raises(ShapeError):
            forward_full(tiny_model, np.zeros((2, tiny_model.spec.hidden + 1)))

    def test_deterministic(self, tiny_model, rng):
        x = rng.standard_normal((3, tiny_model.spec.hidden))
        assert np.array_equal(forward_full(tiny_model, x)[1], forward_full(tiny_model, x)[1])

    def test_zero_residual_quantization_equals_full(self, tiny_model, rng):
        x = rng.standard_normal((3, tiny_model.spec.hidden))
        h_full, _ = forward_full(tiny_model, x)
        h_q, _ = forward_quantized(tiny_model, dict(tiny_model.weights), x)
        assert np.array_equal(h_full, h_q)

    def test_missing_quantized_weight(self, tiny_model, tiny_quantized, rng):
        partial = dict(tiny_quantized)
        partial.pop(tiny_model.matrix_ids()[-1])
        with pytest.raises(ConfigError):
            forward_quantized(tiny_model, partial, rng.standard_normal((2, tiny_model.spec.hidden)))

    def test_low_bit_quantization_diverges(self, tiny_model, rng):
        x = rng.standard_normal((4, tiny_model.spec.hidden))
        quantized = {m: quantize(w, QuantConfig(bits=3)) for m, w in tiny_model.weights.items()}
        _, full = forward_full(tiny_model, x)
        _, quant = forward_quantized(tiny_model, quantized, x)
        assert kl_divergence(distribution_from_logits(full), distribution_from_logits(quant)) > 0

    def test_compensation_sandwich(self, tiny_model, tiny_quantized, rng):
        x = rng.standard_normal((4, tiny_model.spec.hidden))
        residuals = {m: residual(w, tiny_quantized[m]) for m, w in tiny_model.weights.items()}

        h_zero, _ = forward_compensated_sequential(tiny_model, tiny_quantized, {}, x)
        h_quant, _ = forward_quantized(tiny_model, tiny_quantized, x)
        assert np.array_equal(h_zero, h_quant)

        h_full_rank, _ = forward_compensated_sequential(tiny_model, tiny_quantized, build_factor_pool(residuals), x)
        h_full, _ = forward_full(tiny_model, x)
        assert np.max(np.abs(h_full_rank - h_full)) <= 1e-5

    def test_single_expert_moe_matches_dense_layer(self, rng):
        moe = build_synthetic(ModelSpec(hidden=16, ffn_hidden=32, layers=('moe',), n_experts=1, top_k=1,
                                        vocab=32, seed=2))
        dense_spec = ModelSpec(hidden=16, ffn_hidden=32, layers=('dense',), n_experts=1, top_k=1, vocab=32, seed=2)
        weights = {MatrixId(m.layer, m.kind, m.slot): w for m, w in moe.weights.items()}
        dense = ToyModel(spec=dense_spec, weights=weights, routers={}, embed=moe.embed, lm_head=moe.lm_head)
        x = rng.standard_normal((3, 16))
        assert np.allclose(forward_full(moe, x)[0], forward_full(dense, x)[0], atol=1e-12)


def test_swapped_restores_weights(tiny_model):
    mid = tiny_model.matrix_ids()[0]
    original = tiny_model.weights[mid]
    with tiny_model.swapped({mid: np.zeros_like(original)}):
        assert not tiny_model.weights[mid].any()
    assert tiny_model.weights[mid] is original
    with pytest.raises(ConfigError):
        with tiny_model.swapped({MatrixId.parse('L9.ATT_O.o'): original}):
            pass
