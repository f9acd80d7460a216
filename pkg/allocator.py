#!/usr/bin/env python3
"""
Compensated Inference - compensation rank allocator
Priority scores from salience, sensitivity and expert activation; the
standard rank from the timing model; two-stage allocation, power-of-two
alignment and per-window budget enforcement. Exhaustive and greedy
allocators over concave gain tables serve as optimality oracles.
"""

import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from compensator import salience_scores
from errors import ConfigError, RangeError
from toymodel import MatrixId, WindowKind

logger = logging.getLogger(__name__)

PLAN_VERSION = 1
GATE_TOLERANCE = 1e-9
MIN_SLOPE = 1e-9
BRUTE_FORCE_MAX_MATRICES = 5
BRUTE_FORCE_MAX_LEVELS = 5


@dataclass
class TimingModel:
    """T_CPU(r) = t_cpu0 + k_slope * r; t_comm / t_gpu per window kind, all in ms"""
    k_slope: float
    t_comm: dict
    t_gpu: dict
    t_cpu0: float = 0.0
    fit_residual: float = 0.0

    def to_dict(self):
        return {
            'k_slope': self.k_slope,
            't_cpu0': self.t_cpu0,
            't_comm': {WindowKind(k).value: v for k, v in sorted(self.t_comm.items())},
            't_gpu': {WindowKind(k).value: v for k, v in sorted(self.t_gpu.items())},
            'fit_residual': self.fit_residual,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            k_slope=float(data['k_slope']),
            t_comm={WindowKind(k): float(v) for k, v in data['t_comm'].items()},
            t_gpu={WindowKind(k): float(v) for k, v in data['t_gpu'].items()},
            t_cpu0=float(data.get('t_cpu0', 0.0)),
            fit_residual=float(data.get('fit_residual', 0.0)),
        )


def fit_timing(probe_samples, comm_samples, gpu_samples, intercept=True):
    """
    Least-squares line through (rank, cpu_ms) probe points. A negative
    intercept is refitted through the origin. Per-kind comm/gpu are medians.
    """
    ranks = np.array([r for r, _ in probe_samples], dtype=np.float64)
    cpu = np.array([t for _, t in probe_samples], dtype=np.float64)
    if len(set(ranks.tolist())) < 3:
        raise ConfigError(f"Timing fit needs >= 3 distinct probe ranks, got {sorted(set(ranks.tolist()))}")

    t0 = 0.0
    if intercept:
        design = np.column_stack([ranks, np.ones_like(ranks)])
        (slope, t0), *_ = np.linalg.lstsq(design, cpu, rcond=None)
    if not intercept or t0 < 0:
        t0 = 0.0
        slope = float(ranks @ cpu / (ranks @ ranks))

    if slope <= 0:
        logger.warning(f"⚠️  Non-positive timing slope {slope:.3g} ms/rank; flooring to {MIN_SLOPE}")
        slope = MIN_SLOPE

    predicted = t0 + slope * ranks
    norm = np.linalg.norm(cpu)
    residual = float(np.linalg.norm(cpu - predicted) / norm) if norm > 0 else 0.0
    return TimingModel(
        k_slope=float(slope),
        t_comm={k: float(np.median(v)) for k, v in comm_samples.items()},
        t_gpu={k: float(np.median(v)) for k, v in gpu_samples.items()},
        t_cpu0=float(t0),
        fit_residual=residual,
    )


def calibrate_r_std(t, window_kind, cap=None):
    """Largest r with t_cpu0 + k_slope * r + t_comm <= t_gpu, clamped at 0 (and at cap)"""
    hideable = t.t_gpu.get(window_kind, 0.0) - t.t_comm.get(window_kind, 0.0) - t.t_cpu0
    if hideable <= 0:
        return 0
    r_std = int(math.floor(round(hideable / t.k_slope, 9)))
    return r_std if cap is None else min(r_std, cap)


def expert_activation_scores(gates, k=None):
    """G_e = k * g_e over the gate vector; sums to k"""
    gates = np.asarray(gates, dtype=np.float64)
    k = len(gates) if k is None else k
    if k != len(gates):
        raise ConfigError(f"Activated count {k} does not match {len(gates)} gates")
    if abs(gates.sum() - 1.0) > GATE_TOLERANCE:
        raise ConfigError(f"Gates must sum to 1, got {gates.sum():.12f}")
    return k * gates


def priority(v, s_i, s_l, g=None):
    """P = G * Norm_window(V * S) * S_layer for the members of one window"""
    mids = sorted(v)
    products = {m: v[m] * s_i[m] for m in mids}
    total = sum(products.values())
    if total > 0:
        normed = {m: products[m] / total for m in mids}
    else:
        logger.warning(f"⚠️  Zero salience-sensitivity mass over {len(mids)} matrices; uniform priorities")
        normed = {m: 1.0 / len(mids) for m in mids}
    g = g or {}
    return {m: g.get(m, 1.0) * normed[m] * s_l[m] for m in mids}


def continuous_ranks(p, r_std):
    """r~ = P * r_std; r_std is a scalar or a per-matrix map"""
    if isinstance(r_std, dict):
        return {m: p[m] * r_std[m] for m in p}
    return {m: p[m] * r_std for m in p}


@dataclass(frozen=True)
class SelectedCounts:
    salient: float
    residual: float

    @property
    def total(self):
        return self.salient + self.residual


def two_stage_allocate(spectra, r_tilde):
    """Fill each matrix's salient set first, then spill the rest into its residual set"""
    if set(spectra) != set(r_tilde):
        raise ConfigError("Spectra and continuous ranks cover different matrices")
    out = {}
    for mid in sorted(r_tilde):
        spectrum, want = spectra[mid], r_tilde[mid]
        salient = min(want, spectrum.salient_size)
        residual = min(max(want - spectrum.salient_size, 0.0), spectrum.residual_size)
        out[mid] = SelectedCounts(salient, residual)
    return out


def admissible_levels(k0, max_rank):
    levels, r = [0], 2 ** k0
    while r <= max_rank:
        levels.append(r)
        r *= 2
    return levels


def demote(rank, k0):
    """Next admissible value below rank"""
    return rank // 2 if rank > 2 ** k0 else 0


def align(r_tilde, k0=3, max_rank=None):
    """Nearest value in {0} U {2^k, k >= k0}, ties rounding up, then stepped down under max_rank"""
    base = 2 ** k0
    if r_tilde <= 0:
        return 0
    if r_tilde < base:
        lo, hi = 0, base
    else:
        lo = base
        while lo * 2 <= r_tilde:
            lo *= 2
        hi = lo * 2
    rank = hi if hi - r_tilde <= r_tilde - lo else lo
    if max_rank is not None:
        while rank > max_rank:
            rank = demote(rank, k0)
    return rank


def enforce_budget(ranks, priorities, budgets, k0=3):
    """
    Demote the lowest-priority nonzero rank (larger id first on ties) one
    admissible step until every window's total fits its budget.
    budgets maps window id -> r_std.
    """
    ranks = dict(ranks)
    windows = defaultdict(list)
    for mid in ranks:
        windows[mid.window_id].append(mid)
    for window_id, mids in sorted(windows.items()):
        budget = budgets[window_id]
        while sum(ranks[m] for m in mids) > budget:
            nonzero = [m for m in mids if ranks[m] > 0]
            lowest = min(priorities[m] for m in nonzero)
            victim = max(m for m in nonzero if priorities[m] == lowest)
            ranks[victim] = demote(ranks[victim], k0)
    return ranks


@dataclass
class RankPlan:
    ranks: dict                         # MatrixId -> rank
    priorities: dict = field(default_factory=dict)
    k0: int = 3
    r_std: dict = field(default_factory=dict)   # WindowKind -> rank
    provenance: dict = field(default_factory=dict)

    def rank(self, mid):
        return self.ranks.get(mid, 0)

    def window_totals(self):
        totals = defaultdict(int)
        for mid, r in self.ranks.items():
            totals[mid.window_id] += r
        return dict(totals)

    @property
    def total_rank(self):
        return sum(self.ranks.values())

    def to_dict(self):
        entries = []
        for mid in sorted(self.ranks):
            entry = {
                'layer': mid.layer,
                'window': mid.kind.value,
                'slot': mid.slot,
                'rank': int(self.ranks[mid]),
                'priority': float(self.priorities.get(mid, 0.0)),
            }
            if mid.expert is not None:
                entry['expert'] = mid.expert
            entries.append(entry)
        return {
            'version': PLAN_VERSION,
            'admissible': {'zero': True, 'k0': self.k0, 'min_power': 2 ** self.k0},
            'r_std': {k.value: int(v) for k, v in sorted(self.r_std.items())},
            'entries': entries,
            'provenance': dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data):
        ranks, priorities = {}, {}
        for e in data['entries']:
            mid = MatrixId(int(e['layer']), WindowKind(e['window']), e['slot'], e.get('expert'))
            ranks[mid] = int(e['rank'])
            priorities[mid] = float(e.get('priority', 0.0))
        return cls(
            ranks=ranks,
            priorities=priorities,
            k0=int(data['admissible']['k0']),
            r_std={WindowKind(k): int(v) for k, v in data['r_std'].items()},
            provenance=dict(data.get('provenance', {})),
        )


def _window_groups(mids):
    groups = defaultdict(list)
    for mid in sorted(mids):
        groups[mid.window_id].append(mid)
    return groups


def allocate_plan(spectra, s_matrix, s_layer, r_std, k0=3, expert_gates=None, provenance=None):
    """
    priority -> continuous -> two-stage -> align -> enforce_budget, window by
    window. MoE windows budget all experts jointly; G comes from the mean
    calibration gates of each MoE layer (k = number of experts).
    """
    expert_gates = expert_gates or {}
    ranks, priorities = {}, {}
    for window_id, mids in sorted(_window_groups(spectra).items()):
        kind = mids[0].kind
        layer = mids[0].layer
        budget = r_std.get(kind, 0)

        v = salience_scores([spectra[m] for m in mids])
        g = {}
        if layer in expert_gates and any(m.expert is not None for m in mids):
            scores = expert_activation_scores(expert_gates[layer])
            g = {m: float(scores[m.expert]) for m in mids if m.expert is not None}
        p = priority(v, s_matrix, {m: s_layer.get(layer, 1.0) for m in mids}, g)
        r_tilde = continuous_ranks(p, budget)
        counts = two_stage_allocate({m: spectra[m] for m in mids}, r_tilde)
        for m in mids:
            ranks[m] = align(counts[m].total, k0, max_rank=spectra[m].n)
        priorities.update(p)
        logger.debug(f"{window_id}: budget {budget}, r~ {[round(r_tilde[m], 3) for m in mids]}")

    budgets = {w: r_std.get(mids[0].kind, 0) for w, mids in _window_groups(ranks).items()}
    ranks = enforce_budget(ranks, priorities, budgets, k0)
    plan = RankPlan(ranks=ranks, priorities=priorities, k0=k0, r_std=dict(r_std), provenance=dict(provenance or {}))
    logger.info(f"✅ Allocated {plan.total_rank} total rank over {len(ranks)} matrices "
                f"({sum(1 for r in ranks.values() if r == 0)} skipped)")
    return plan


def uniform_plan(matrix_ids, rank, k0=3, max_ranks=None, provenance=None):
    """Fixed-rank baseline: every matrix at the same aligned rank, capped per matrix"""
    max_ranks = max_ranks or {}
    ranks = {m: align(rank, k0, max_rank=max_ranks.get(m)) for m in matrix_ids}
    return RankPlan(ranks=ranks, priorities={m: 1.0 for m in matrix_ids}, k0=k0,
                    provenance=dict(provenance or {}, mode='fixed', fixed_rank=rank))


def concave_gain_table(sigma, levels, weight=1.0):
    """Recovered residual energy weight * sum_{j<r} sigma_j^2 at each level"""
    energy = np.concatenate(([0.0], np.cumsum(np.asarray(sigma, dtype=np.float64) ** 2)))
    return {r: weight * float(energy[min(r, len(energy) - 1)]) for r in levels}


def brute_force_allocate(gain_tables, levels, budget):
    """Exact maximizer of sum gain_i(r_i) subject to sum r_i <= budget"""
    if len(gain_tables) > BRUTE_FORCE_MAX_MATRICES or len(levels) > BRUTE_FORCE_MAX_LEVELS:
        raise RangeError(f"Instance too large for exhaustive search: {len(gain_tables)} matrices x {len(levels)} levels")
    keys = list(gain_tables)
    best_plan, best_value = {k: 0 for k in keys}, sum(gain_tables[k][0] for k in keys)
    for combo in itertools.product(sorted(levels), repeat=len(keys)):
        if sum(combo) > budget:
            continue
        value = sum(gain_tables[k][r] for k, r in zip(keys, combo))
        if value > best_value:
            best_plan, best_value = dict(zip(keys, combo)), value
    return best_plan, best_value


def greedy_allocate(gain_tables, levels, budget):
    """Repeatedly take the next level with the largest marginal gain per unit rank that still fits"""
    levels = sorted(levels)
    keys = list(gain_tables)
    step = {k: 0 for k in keys}
    used = 0
    while True:
        best, best_rate = None, 0.0
        for k in keys:
            if step[k] + 1 >= len(levels):
                continue
            cur, nxt = levels[step[k]], levels[step[k] + 1]
            if used - cur + nxt > budget:
                continue
            rate = (gain_tables[k][nxt] - gain_tables[k][cur]) / (nxt - cur)
            if rate > best_rate:
                best, best_rate = k, rate
        if best is None:
            break
        used += levels[step[best] + 1] - levels[step[best]]
        step[best] += 1
    plan = {k: levels[step[k]] for k in keys}
    return plan, sum(gain_tables[k][plan[k]] for k in keys)
