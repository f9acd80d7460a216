#!/usr/bin/env python3
"""
Tests for KL-based matrix and layer sensitivity
"""

import numpy as np
import pytest

from compensator import build_factor_pool, select_factors
from errors import ConfigError, RangeError, ShapeError
from quantizer import quantize, residual
from sensitivity import (
    CalibrationSet,
    build_calibration_set,
    distribution_from_logits,
    group_matrices,
    kl_divergence,
    layer_scores,
    layer_sensitivity,
    matrix_scores,
    matrix_sensitivity,
    output_distribution,
    sensitivity_report,
)
from toymodel import (
    MatrixId,
    ModelSpec,
    WindowKind,
    build_synthetic,
    forward_compensated_sequential,
    forward_quantized,
    routing_statistics,
)


def test_kl_closed_form():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    expected = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.14384, abs=1e-5)


def test_kl_batch_mean_and_shape_check():
    p = np.array([[0.5, 0.5], [0.5, 0.5]])
    q = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert kl_divergence(p, q) == pytest.approx(0.14384 / 2, abs=1e-5)
    with pytest.raises(ShapeError):
        kl_divergence([0.5, 0.5], [1.0, 0.0, 0.0])


def test_distribution_from_logits():
    assert np.allclose(distribution_from_logits(np.zeros(5)), 0.2)
    assert np.allclose(distribution_from_logits([np.log(2.0), 0.0]), [2 / 3, 1 / 3])


def test_output_distribution_rows_sum_to_one(tiny_model):
    calib = build_calibration_set(tiny_model.spec.hidden, 1, 5, seed=0)
    p = output_distribution(tiny_model, calib.inputs[0])
    assert p.shape == (5, tiny_model.spec.vocab)
    assert np.allclose(p.sum(axis=-1), 1.0)


def test_calibration_set_is_seeded():
    a = build_calibration_set(8, 3, 4, seed=9)
    b = build_calibration_set(8, 3, 4, seed=9)
    assert a.count == 3
    assert all(np.array_equal(x, y) for x, y in zip(a.inputs, b.inputs))
    with pytest.raises(ConfigError):
        build_calibration_set(8, 0, 4, seed=9)


def test_identical_weights_have_zero_sensitivity(tiny_model):
    calib = build_calibration_set(tiny_model.spec.hidden, 2, 4, seed=1)
    d = matrix_sensitivity(tiny_model, dict(tiny_model.weights), calib)
    assert set(d) == set(tiny_model.matrix_ids())
    assert all(v == 0.0 for v in d.values())
    assert all(v == 0.0 for v in layer_sensitivity(tiny_model, dict(tiny_model.weights), calib).values())


def test_quantized_weights_are_sensitive_and_model_restored(tiny_model, tiny_quantized):
    before = tiny_model.checksum()
    calib = build_calibration_set(tiny_model.spec.hidden, 2, 4, seed=1)
    d = matrix_sensitivity(tiny_model, tiny_quantized, calib)
    assert tiny_model.checksum() == before

    gates = routing_statistics(tiny_model, calib.inputs)
    for mid, value in d.items():
        routed = mid.expert is None or gates[mid.layer][mid.expert] > 0
        if routed and np.any(residual(tiny_model.weights[mid], tiny_quantized[mid])):
            assert value > 0.0, mid
        else:
            assert value == 0.0, mid


def test_missing_quantized_weight(tiny_model, tiny_quantized):
    calib = build_calibration_set(tiny_model.spec.hidden, 1, 2, seed=1)
    partial = dict(tiny_quantized)
    victim = tiny_model.matrix_ids()[0]
    del partial[victim]
    with pytest.raises(ConfigError, match=str(victim).replace('.', r'\.')):
        matrix_sensitivity(tiny_model, partial, calib)


def test_matrix_scores():
    q, k = MatrixId(0, WindowKind.ATT_QKV, 'q'), MatrixId(0, WindowKind.ATT_QKV, 'k')
    o = MatrixId(0, WindowKind.ATT_O, 'o')
    groups = group_matrices([q, k, o])
    assert groups == {'L0.ATT_QKV': [q, k], 'L0.ATT_O': [o]}
    assert matrix_scores({q: 3.0, k: 1.0, o: 0.2}, groups) == {q: 0.75, k: 0.25, o: 1.0}
    assert matrix_scores({q: 0.0, k: 0.0}, {'w': [q, k]}) == {q: 0.5, k: 0.5}
    assert list(group_matrices([q, o], scope='layer')) == ['L0']
    with pytest.raises(ConfigError):
        group_matrices([q], scope='model')


def test_layer_scores_piecewise():
    d = {0: 5.0, 1: 3.0, 2: 1.0}
    scores, top = layer_scores(d, 1)
    assert top == (0,)
    assert scores == pytest.approx({0: 1.0, 1: 0.6, 2: 0.2})
    scores, top = layer_scores(d, 2)
    assert top == (0, 1)
    assert scores == pytest.approx({0: 1.0, 1: 1.0, 2: 1 / 3})
    scores, _ = layer_scores(d, 3)
    assert all(v == 1.0 for v in scores.values())


def test_layer_scores_bounds():
    with pytest.raises(RangeError):
        layer_scores({0: 1.0}, 0)
    with pytest.raises(RangeError):
        layer_scores({0: 1.0}, 2)
    scores, _ = layer_scores({0: 0.0, 1: 0.0}, 1)
    assert scores == {0: 1.0, 1: 1.0}


def test_sensitivity_report(tiny_model, tiny_quantized):
    calib = build_calibration_set(tiny_model.spec.hidden, 2, 4, seed=5)
    report = sensitivity_report(tiny_model, tiny_quantized, calib, K=1)
    assert len(report.top_set) == 1
    assert all(0.0 < v <= 1.0 for v in report.s_layer.values())
    doc = report.to_dict()
    assert doc['K'] == 1 and doc['seed'] == 5
    assert set(doc['s_matrix']) == {str(m) for m in tiny_model.matrix_ids()}
    for window, mids in group_matrices(report.s_matrix).items():
        assert sum(report.s_matrix[m] for m in mids) == pytest.approx(1.0)


def test_compensation_improves_fidelity():
    trials, improved = 50, 0
    for seed in range(trials):
        model = build_synthetic(ModelSpec(hidden=16, ffn_hidden=32, layers=('dense', 'moe'), n_experts=3,
                                          top_k=2, vocab=32, seed=seed, planted_rank=3))
        quantized = {m: quantize(w, model.spec.plant_quant) for m, w in model.weights.items()}
        residuals = {m: residual(w, quantized[m]) for m, w in model.weights.items()}
        factors = select_factors(build_factor_pool(residuals, max_rank=8), {m: 8 for m in residuals})

        for mid, f in factors.items():
            before = np.linalg.norm(residuals[mid])
            after = np.linalg.norm(residuals[mid] - f.A @ f.B)
            assert after < before, mid

        x = build_calibration_set(16, 1, 6, seed).inputs[0]
        p = output_distribution(model, x)
        q_quant = distribution_from_logits(forward_quantized(model, quantized, x)[1])
        q_comp = distribution_from_logits(forward_compensated_sequential(model, quantized, factors, x)[1])
        improved += kl_divergence(p, q_comp) < kl_divergence(p, q_quant)
    assert improved >= 0.9 * trials


def test_matrix_order_does_not_change_sensitivity(tiny_model, tiny_quantized):
    calib = build_calibration_set(tiny_model.spec.hidden, 2, 4, seed=1)
    together = matrix_sensitivity(tiny_model, tiny_quantized, calib)
    for mid in reversed(tiny_model.matrix_ids()):
        assert matrix_sensitivity(tiny_model, tiny_quantized, calib, [mid]) == {mid: together[mid]}


def test_batch_order_does_not_change_sensitivity(tiny_model, tiny_quantized):
    calib = build_calibration_set(tiny_model.spec.hidden, 3, 4, seed=2)
    shuffled = CalibrationSet(inputs=calib.inputs[::-1], seed=calib.seed)
    forward = matrix_sensitivity(tiny_model, tiny_quantized, calib)
    backward = matrix_sensitivity(tiny_model, tiny_quantized, shuffled)
    assert backward == pytest.approx(forward, rel=1e-12, abs=1e-15)
    assert layer_sensitivity(tiny_model, tiny_quantized, shuffled) == pytest.approx(
        layer_sensitivity(tiny_model, tiny_quantized, calib), rel=1e-12, abs=1e-15)
