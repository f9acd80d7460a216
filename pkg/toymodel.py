#!/usr/bin/env python3
"""
Compensated Inference - synthetic transformer surrogate
Deterministic dense/MoE toy model with planted residual structure, routing
and the three reference forward passes (full, quantized, compensated).
"""

import hashlib
import logging
import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import total_ordering
from typing import Optional

import numpy as np

from compensator import apply
from errors import ConfigError, ShapeError
from numerics import softmax
from quantizer import QuantConfig, QuantizedWeight, dequantize, round_half_away

logger = logging.getLogger(__name__)

LAYER_KINDS = ('dense', 'moe')

# Normalized singular-value profile of the planted residual
KNEE_STRENGTH = 0.15
NOISE_TOP = 0.05
NOISE_BOTTOM = 0.01
MIN_STRONG = 0.4


class WindowKind(str, Enum):
    ATT_QKV = 'ATT_QKV'
    ATT_O = 'ATT_O'
    FFN_UPGATE = 'FFN_UPGATE'
    FFN_DOWN = 'FFN_DOWN'


WINDOW_SLOTS = {
    WindowKind.ATT_QKV: ('q', 'k', 'v'),
    WindowKind.ATT_O: ('o',),
    WindowKind.FFN_UPGATE: ('up', 'gate'),
    WindowKind.FFN_DOWN: ('down',),
}
WINDOW_ORDER = tuple(WindowKind)
SLOT_ORDER = ('q', 'k', 'v', 'o', 'up', 'gate', 'down')

MATRIX_ID_RE = re.compile(
    r'^L(\d+)\.(ATT_QKV|ATT_O|FFN_UPGATE|FFN_DOWN)\.(q|k|v|o|up|gate|down)(?:\.e(\d+))?$'
)


@total_ordering
@dataclass(frozen=True)
class MatrixId:
    layer: int
    kind: WindowKind
    slot: str
    expert: Optional[int] = None

    def __str__(self):
        text = f"L{self.layer}.{self.kind.value}.{self.slot}"
        return text if self.expert is None else f"{text}.e{self.expert}"

    @property
    def sort_key(self):
        return (self.layer, WINDOW_ORDER.index(self.kind), SLOT_ORDER.index(self.slot),
                -1 if self.expert is None else self.expert)

    @property
    def window_id(self):
        return f"L{self.layer}.{self.kind.value}"

    def __lt__(self, other):
        return self.sort_key < other.sort_key

    @classmethod
    def parse(cls, text):
        m = MATRIX_ID_RE.match(text)
        if not m:
            raise ConfigError(f"Malformed matrix id: {text!r}")
        layer, kind, slot, expert = m.groups()
        kind = WindowKind(kind)
        if slot not in WINDOW_SLOTS[kind]:
            raise ConfigError(f"Slot {slot!r} does not belong to window {kind.value}")
        return cls(int(layer), kind, slot, None if expert is None else int(expert))


@dataclass(frozen=True)
class Window:
    """One compensation window; MoE windows carry the activated expert set once resolved"""
    kind: WindowKind
    layer: int
    slots: tuple
    moe: bool = False
    experts: tuple = ()
    position: int = 0

    @property
    def window_id(self):
        return f"L{self.layer}.{self.kind.value}"

    @property
    def members(self):
        if not self.moe or self.kind in (WindowKind.ATT_QKV, WindowKind.ATT_O):
            return tuple(MatrixId(self.layer, self.kind, s) for s in self.slots)
        return tuple(MatrixId(self.layer, self.kind, s, e) for e in self.experts for s in self.slots)

    @property
    def per_expert(self):
        return self.moe and self.kind in (WindowKind.FFN_UPGATE, WindowKind.FFN_DOWN)

    def resolve(self, experts):
        return replace(self, experts=tuple(sorted(experts)))


@dataclass(frozen=True)
class ModelSpec:
    hidden: int = 64
    ffn_hidden: int = 128
    layers: tuple = ('dense', 'dense', 'moe')
    n_experts: int = 4
    top_k: int = 2
    vocab: int = 256
    seed: int = 0
    planted_rank: int = 3
    residual_scale: float = 0.45   # max |residual| as a fraction of the grid step
    plant_bits: int = 4
    plant_group_size: Optional[int] = None

    def validate(self):
        for name in ('hidden', 'ffn_hidden', 'vocab'):
            if getattr(self, name) < 2:
                raise ConfigError(f"model.{name} must be >= 2, got {getattr(self, name)}")
        bad = [k for k in self.layers if k not in LAYER_KINDS]
        if bad:
            raise ConfigError(f"model.layers entries must be 'dense' or 'moe', got {bad[0]!r}")
        if self.n_experts < 1:
            raise ConfigError(f"model.n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"model.top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.seed < 0:
            raise ConfigError(f"model.seed must be >= 0, got {self.seed}")
        max_planted = min(16, min(self.hidden, self.ffn_hidden) - 2)
        if not 0 <= self.planted_rank <= max(max_planted, 0):
            raise ConfigError(f"model.planted_rank must be in [0, {max(max_planted, 0)}], got {self.planted_rank}")
        if not 0 <= self.residual_scale < 0.5:
            raise ConfigError(f"model.residual_scale must be in [0, 0.5), got {self.residual_scale}")
        cfg = self.plant_quant
        try:
            cfg.validate((self.hidden, self.hidden))
            cfg.validate((self.hidden, self.ffn_hidden))
        except ConfigError as e:
            raise ConfigError(f"model.plant_* invalid: {e}") from e
        return self

    @property
    def plant_quant(self):
        return QuantConfig(bits=self.plant_bits, group_size=self.plant_group_size)

    def matrix_shape(self, slot):
        d, f = self.hidden, self.ffn_hidden
        return {'up': (d, f), 'gate': (d, f), 'down': (f, d)}.get(slot, (d, d))

    def is_moe(self, layer):
        return self.layers[layer] == 'moe'

    def layer_windows(self, layer, start=0):
        """QKV -> O -> UPGATE -> DOWN for one layer, positions numbered from start"""
        moe = self.is_moe(layer)
        return [
            Window(kind, layer, WINDOW_SLOTS[kind], moe=moe, position=start + i)
            for i, kind in enumerate(WINDOW_ORDER)
        ]

    def matrix_ids(self):
        ids = []
        for layer in range(len(self.layers)):
            for window in self.layer_windows(layer):
                if window.per_expert:
                    window = window.resolve(range(self.n_experts))
                ids.extend(window.members)
        return sorted(ids)


@dataclass(frozen=True)
class RouterOutput:
    activated: tuple
    gates: np.ndarray

    def gate(self, expert):
        return float(self.gates[self.activated.index(expert)])


@dataclass
class ToyModel:
    spec: ModelSpec
    weights: dict                   # MatrixId -> float32 matrix
    routers: dict                   # layer -> d x E float32
    embed: np.ndarray               # vocab x d
    lm_head: np.ndarray             # d x vocab
    planted: dict = field(default_factory=dict)  # MatrixId -> planted salient count

    def matrix_ids(self):
        return sorted(self.weights)

    def layer_matrix_ids(self, layer):
        return [m for m in self.matrix_ids() if m.layer == layer]

    @contextmanager
    def swapped(self, replacements):
        """Temporarily replace weights; the original arrays are put back on exit"""
        originals = {}
        try:
            for mid, w in replacements.items():
                if mid not in self.weights:
                    raise ConfigError(f"Cannot swap unknown matrix {mid}")
                originals[mid] = self.weights[mid]
                self.weights[mid] = w
            yield self
        finally:
            self.weights.update(originals)

    def checksum(self):
        h = hashlib.sha256()
        for mid in self.matrix_ids():
            h.update(str(mid).encode('utf-8'))
            h.update(np.ascontiguousarray(self.weights[mid]).tobytes())
        for layer in sorted(self.routers):
            h.update(np.ascontiguousarray(self.routers[layer]).tobytes())
        h.update(self.embed.tobytes())
        h.update(self.lm_head.tobytes())
        return h.hexdigest()


def _orthonormal(rng, rows, n):
    q, r = np.linalg.qr(rng.standard_normal((rows, n)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def planted_profile(n, planted_rank):
    """Singular-value profile whose largest second difference sits at planted_rank"""
    if planted_rank == 0:
        return np.ones(n)
    strong = np.linspace(1.0, max(MIN_STRONG, 1.0 - 0.1 * (planted_rank - 2)), planted_rank - 1)
    tail = np.linspace(NOISE_TOP, NOISE_BOTTOM, n - planted_rank)
    if planted_rank == 1:
        return np.concatenate(([1.0], tail))
    return np.concatenate((strong, [KNEE_STRENGTH], tail))


def _planted_matrix(rng, shape, spec):
    """
    W = codes * s + E where RTN at the planting bit-width recovers codes and s
    exactly, so the quantization residual is E with the planted spectrum.
    """
    rows, cols = shape
    cfg = spec.plant_quant
    qmax = cfg.qmax
    width = cfg.group_width(cols)
    s = 3.0 / (qmax * np.sqrt(rows))

    z = rng.standard_normal(shape)
    codes = np.clip(round_half_away(z * qmax / 3.0), -(qmax - 1), qmax - 1)

    n = min(rows, cols)
    u = _orthonormal(rng, rows, n)
    v = _orthonormal(rng, cols, n)
    e = (u * planted_profile(n, spec.planted_rank)) @ v.T
    peak = np.abs(e).max()
    e = e * (spec.residual_scale * s / peak) if peak > 0 else e

    # One entry per group sits exactly on +-qmax with zero residual, pinning the RTN scale to s
    groups = cols // width
    signs = np.where(rng.random((rows, groups)) < 0.5, -1.0, 1.0)
    grouped_e = e.reshape(rows, groups, width).copy()
    grouped_codes = codes.reshape(rows, groups, width).copy()
    pin = np.abs(grouped_e).argmin(axis=-1)
    r_idx, g_idx = np.meshgrid(np.arange(rows), np.arange(groups), indexing='ij')
    grouped_e[r_idx, g_idx, pin] = 0.0
    grouped_codes[r_idx, g_idx, pin] = signs * qmax
    w = grouped_codes.reshape(rows, cols) * s + grouped_e.reshape(rows, cols)
    return w.astype(np.float32)


def build_synthetic(spec):
    """Build the seeded toy model; byte-identical for equal specs"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.hidden
    weights, planted = {}, {}
    for mid in spec.matrix_ids():
        weights[mid] = _planted_matrix(rng, spec.matrix_shape(mid.slot), spec)
        planted[mid] = spec.planted_rank
    routers = {
        layer: (rng.standard_normal((d, spec.n_experts)) / np.sqrt(d)).astype(np.float32)
        for layer in range(len(spec.layers)) if spec.is_moe(layer)
    }
    embed = rng.standard_normal((spec.vocab, d)).astype(np.float32)
    lm_head = (rng.standard_normal((d, spec.vocab)) / np.sqrt(d)).astype(np.float32)
    logger.info(f"Built toy model: {len(spec.layers)} layers, {len(weights)} matrices, planted rank {spec.planted_rank}")
    return ToyModel(spec=spec, weights=weights, routers=routers, embed=embed, lm_head=lm_head, planted=planted)


def route_logits(logits, top_k):
    """Softmax, stable top-k (lower index wins ties), renormalize over the activated set"""
    p = softmax(logits)
    order = np.argsort(-p, kind='stable')[:top_k]
    activated = tuple(sorted(int(e) for e in order))
    gates = p[list(activated)]
    return RouterOutput(activated=activated, gates=gates / gates.sum())


def router(model, layer, x):
    x = np.asarray(x, dtype=np.float64)
    w = model.routers.get(layer)
    if w is None:
        raise ConfigError(f"Layer {layer} is not an MoE layer")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"Router input width {x.shape[-1]} != hidden {w.shape[0]}")
    return route_logits(x @ w.astype(np.float64), model.spec.top_k)


def route_tokens(model, layer, h):
    return [router(model, layer, row) for row in h]


def expert_rows(routes):
    """Activated experts (ascending) and the token rows each one serves"""
    experts = sorted({e for r in routes for e in r.activated})
    rows = {e: np.array([t for t, r in enumerate(routes) if e in r.activated], dtype=np.intp) for e in experts}
    return experts, rows


def silu(x):
    return x / (1.0 + np.exp(-x))


def rms_norm(h, eps=1e-6):
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps)


def causal_attention(q, k, v):
    t, d = q.shape
    scores = (q @ k.T) / np.sqrt(d)
    scores = np.where(np.tril(np.ones((t, t), dtype=bool)), scores, -np.inf)
    return softmax(scores) @ v


def forward(model, x, project, observe_routes=None):
    """
    Shared layer loop. project(window, inputs, aux) maps {expert|None: X} to
    {MatrixId: Y}. For MoE windows aux carries the full normed activation
    (UPGATE) or the merged (up, gate) outputs per expert (DOWN).
    Returns (hidden states, logits).
    """
    spec = model.spec
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != spec.hidden:
        raise ShapeError(f"Input {h.shape} does not match hidden size {spec.hidden}")

    position = 0
    for layer, kind in enumerate(spec.layers):
        qkv_w, o_w, ug_w, down_w = spec.layer_windows(layer, start=position)
        position += len(WINDOW_ORDER)

        a = rms_norm(h)
        out = project(qkv_w, {None: a})
        q, k, v = (out[m] for m in qkv_w.members)
        attn = causal_attention(q, k, v)
        out = project(o_w, {None: attn})
        h = h + out[o_w.members[0]]

        a = rms_norm(h)
        if kind == 'dense':
            up_id, gate_id = ug_w.members
            out = project(ug_w, {None: a})
            act = silu(out[gate_id]) * out[up_id]
            out = project(down_w, {None: act})
            h = h + out[down_w.members[0]]
            continue

        routes = route_tokens(model, layer, a)
        if observe_routes is not None:
            observe_routes(layer, routes)
        experts, rows = expert_rows(routes)
        ug = ug_w.resolve(experts)
        out = project(ug, {e: a[rows[e]] for e in experts}, a)
        pre = {e: (out[MatrixId(layer, ug.kind, 'up', e)], out[MatrixId(layer, ug.kind, 'gate', e)]) for e in experts}
        acts = {e: silu(gate) * up for e, (up, gate) in pre.items()}
        dw = down_w.resolve(experts)
        out = project(dw, acts, pre)
        ffn = np.zeros_like(h)
        for e in experts:
            g = np.array([routes[t].gate(e) for t in rows[e]])
            ffn[rows[e]] += g[:, None] * out[MatrixId(layer, dw.kind, 'down', e)]
        h = h + ffn

    logits = rms_norm(h) @ model.lm_head.astype(np.float64)
    return h, logits


def _dense(w):
    if isinstance(w, QuantizedWeight):
        return dequantize(w)
    return np.asarray(w, dtype=np.float64)


def _linear(weights):
    def project(window, inputs, aux=None):
        out = {}
        for mid in window.members:
            x = inputs[mid.expert]
            out[mid] = x @ weights[mid]
        return out
    return project


def _dense_table(model, quantized):
    missing = [str(m) for m in model.matrix_ids() if m not in quantized]
    if missing:
        raise ConfigError(f"No quantized weight for {missing[0]}")
    return {mid: _dense(quantized[mid]) for mid in model.matrix_ids()}


def forward_full(model, x):
    return forward(model, x, _linear({m: _dense(w) for m, w in model.weights.items()}))


def forward_quantized(model, quantized, x):
    return forward(model, x, _linear(_dense_table(model, quantized)))


def forward_compensated_sequential(model, quantized, factors, x):
    """Y = X W_hat + (X A) B per linear op; missing factors mean rank 0"""
    table = _dense_table(model, quantized)

    def project(window, inputs, aux=None):
        out = {}
        for mid in window.members:
            x_in = inputs[mid.expert]
            y = x_in @ table[mid]
            f = factors.get(mid)
            out[mid] = y + apply(x_in, f) if f is not None and f.rank > 0 else y
        return out

    return forward(model, x, project)


def routing_statistics(model, inputs):
    """Mean gate mass per expert for each MoE layer over all calibration tokens"""
    totals = {layer: np.zeros(model.spec.n_experts) for layer in model.routers}
    counts = {layer: 0 for layer in model.routers}

    def observe(layer, routes):
        for r in routes:
            totals[layer][list(r.activated)] += r.gates
        counts[layer] += len(routes)

    table = {m: _dense(w) for m, w in model.weights.items()}
    for x in inputs:
        forward(model, x, _linear(table), observe_routes=observe)
    return {layer: totals[layer] / counts[layer] if counts[layer] else totals[layer] for layer in totals}
