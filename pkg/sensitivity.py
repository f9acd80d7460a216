#!/usr/bin/env python3
"""
Compensated Inference - quantization sensitivity
KL-divergence probes that swap one matrix (or one whole layer) to its
quantized form, plus the window-normalized and top-K layer scores.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, NumericError, RangeError, ShapeError
from numerics import softmax
from quantizer import QuantizedWeight, dequantize
from toymodel import forward_full

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SCORE_FLOOR = 1e-12


@dataclass(frozen=True)
class CalibrationSet:
    inputs: tuple
    seed: int

    @property
    def count(self):
        return len(self.inputs)


def build_calibration_set(hidden, samples, tokens, seed):
    """Seeded Gaussian activation batches (tokens x hidden)"""
    if samples < 1 or tokens < 1:
        raise ConfigError(f"Calibration needs >= 1 sample and token, got {samples} x {tokens}")
    rng = np.random.default_rng(seed)
    inputs = tuple(rng.standard_normal((tokens, hidden)) for _ in range(samples))
    return CalibrationSet(inputs=inputs, seed=seed)


def distribution_from_logits(logits):
    return softmax(logits, floor=PROB_FLOOR)


def output_distribution(model, x):
    _, logits = forward_full(model, x)
    return distribution_from_logits(logits)


def kl_divergence(p, q):
    """Natural-log KL(p || q) per row, averaged over rows when batched"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"Distribution shapes differ: {p.shape} vs {q.shape}")
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    per_row = np.sum(p * np.log(p / q), axis=-1)
    return max(float(np.mean(per_row)), 0.0)


def _mean_kl(model, reference, calib):
    return float(np.mean([kl_divergence(ref, output_distribution(model, x)) for ref, x in zip(reference, calib.inputs)]))


def _dense(w):
    return dequantize(w) if isinstance(w, QuantizedWeight) else np.asarray(w, dtype=np.float64)


def _probe(model, quantized, calib, groups):
    """Mean KL for each group of matrices swapped in together; model restored after each"""
    before = model.checksum()
    reference = [output_distribution(model, x) for x in calib.inputs]
    results = {}
    for key, mids in groups.items():
        missing = [str(m) for m in mids if m not in quantized]
        if missing:
            raise ConfigError(f"No quantized weight for {missing[0]}")
        with model.swapped({m: _dense(quantized[m]) for m in mids}):
            results[key] = _mean_kl(model, reference, calib)
    if model.checksum() != before:
        raise NumericError("Model weights changed during sensitivity probing")
    return results


def matrix_sensitivity(model, quantized, calib, matrix_ids=None):
    """D_i for each matrix swapped in isolation"""
    mids = sorted(matrix_ids or model.matrix_ids())
    return _probe(model, quantized, calib, {m: [m] for m in mids})


def layer_sensitivity(model, quantized, calib):
    """D_l with every matrix of the layer swapped at once"""
    groups = {layer: model.layer_matrix_ids(layer) for layer in range(len(model.spec.layers))}
    return _probe(model, quantized, calib, groups)


def group_matrices(matrix_ids, scope='window'):
    """Normalization groups: compensation windows (experts together) or whole layers"""
    if scope not in ('window', 'layer'):
        raise ConfigError(f"Unknown sensitivity scope {scope!r}")
    groups = defaultdict(list)
    for mid in sorted(matrix_ids):
        groups[mid.window_id if scope == 'window' else f"L{mid.layer}"].append(mid)
    return dict(groups)


def matrix_scores(d_matrix, groups):
    """S_i = D_i / sum of D over the group; uniform when the group sum is zero"""
    scores = {}
    for key, mids in groups.items():
        total = sum(d_matrix[m] for m in mids)
        if total > 0:
            scores.update({m: d_matrix[m] / total for m in mids})
        else:
            logger.warning(f"⚠️  Zero sensitivity mass in {key}; using uniform scores")
            scores.update({m: 1.0 / len(mids) for m in mids})
    return scores


def layer_scores(d_layer, K):
    """S_l = 1 for the K most sensitive layers, D_l / min over that set otherwise"""
    layers = sorted(d_layer)
    if not 1 <= K <= len(layers):
        raise RangeError(f"K must be in [1, {len(layers)}], got {K}")
    ranked = sorted(layers, key=lambda l: (-d_layer[l], l))
    top = tuple(sorted(ranked[:K]))
    floor = min(d_layer[l] for l in top)
    if floor <= 0:
        logger.warning("⚠️  Top-K layer sensitivity is zero; every layer scores 1")
        return {l: 1.0 for l in layers}, top
    scores = {l: 1.0 if l in top else min(max(d_layer[l] / floor, SCORE_FLOOR), 1.0) for l in layers}
    return scores, top


@dataclass
class SensitivityReport:
    d_matrix: dict
    d_layer: dict
    s_matrix: dict
    s_layer: dict
    top_set: tuple
    K: int
    scope: str = 'window'
    seed: int = 0

    def to_dict(self):
        return {
            'd_matrix': {str(m): v for m, v in sorted(self.d_matrix.items())},
            'd_layer': {str(l): v for l, v in sorted(self.d_layer.items())},
            's_matrix': {str(m): v for m, v in sorted(self.s_matrix.items())},
            's_layer': {str(l): v for l, v in sorted(self.s_layer.items())},
            'top_set': list(self.top_set),
            'K': self.K,
            'scope': self.scope,
            'seed': self.seed,
        }


def sensitivity_report(model, quantized, calib, K, scope='window'):
    logger.info(f"📊 Probing sensitivity over {calib.count} calibration batches")
    d_matrix = matrix_sensitivity(model, quantized, calib)
    d_layer = layer_sensitivity(model, quantized, calib) if model.spec.layers else {}
    s_matrix = matrix_scores(d_matrix, group_matrices(d_matrix, scope))
    s_layer, top = layer_scores(d_layer, K) if d_layer else ({}, ())
    return SensitivityReport(d_matrix, d_layer, s_matrix, s_layer, top, K, scope, calib.seed)
