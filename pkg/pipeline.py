#!/usr/bin/env python3
"""
Compensated Inference - heterogeneous pipeline
A backbone worker runs the quantized model while a compensation worker
computes the low-rank corrections, one rendezvous per compensation window
over a shared mailbox. Every span is timestamped for overlap profiling.
"""

import logging
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import pandas as pd

from compensator import apply, select_factors
from errors import ProtocolError
from quantizer import QuantizedWeight, dequantize
from toymodel import WINDOW_ORDER, WindowKind, expert_rows, forward, route_tokens, silu

logger = logging.getLogger(__name__)

DEFAULT_WATCHDOG_S = 5.0
POLL_S = 0.05
NS_PER_MS = 1_000_000

LANES = ('step', 'window', 'gpu', 'cpu', 'comm')
PROFILE_COLUMNS = ['scope', 'window', 'total_ms', 'cpu_ms', 'gpu_ms', 'comm_ms', 'overlap_ms']
TIME_COLUMNS = PROFILE_COLUMNS[2:]
PROBE_SLOTS = ('q', 'o', 'up', 'down')


def now_ns():
    # Monotonic; wall-clock time can jump
    return time.perf_counter_ns()


def _hold(ms):
    """Injected busy time for tests and delay studies"""
    if ms > 0:
        time.sleep(ms / 1000.0)


def build_schedule(model):
    """Windows of every layer in execution order; MoE windows resolve experts at run time"""
    spec = model.spec
    schedule = []
    for layer in range(len(spec.layers)):
        schedule.extend(spec.layer_windows(layer, start=len(schedule)))
    return schedule


@dataclass(frozen=True)
class TraceEvent:
    step: int
    position: int
    window_id: str
    kind: str
    lane: str
    start_ns: int
    end_ns: int
    rank: int = 0


@dataclass
class ProfileRecord:
    scope: str
    window: str
    total_ms: float
    cpu_ms: float
    gpu_ms: float
    comm_ms: float
    overlap_ms: float
    step: Optional[int] = None

    @property
    def exposed_ms(self):
        """Compensation time not hidden behind the backbone"""
        return self.cpu_ms - self.overlap_ms

    def violations(self, tolerance=1e-9):
        problems = []
        for name in TIME_COLUMNS:
            if getattr(self, name) < 0:
                problems.append(f"{name} < 0")
        if self.overlap_ms > min(self.cpu_ms, self.gpu_ms) + tolerance:
            problems.append("overlap_ms > min(cpu_ms, gpu_ms)")
        if self.comm_ms > self.total_ms + tolerance:
            problems.append("comm_ms > total_ms")
        return problems

    def as_row(self):
        return {c: getattr(self, c) for c in PROFILE_COLUMNS}


class Mailbox:
    """
    Shared buffers plus the start/done signal pair. Only one task is ever
    outstanding: the backbone writes, sets start, and reads only after done.
    """

    def __init__(self, watchdog_s=DEFAULT_WATCHDOG_S):
        self.watchdog_s = watchdog_s
        self.start = threading.Event()
        self.done = threading.Event()
        self.activation = None
        self.result = None
        self.generation = 0
        self.result_generation = 0
        self.result_position = None
        self.diagnostic = None
        self.activation_writes = 0
        self.result_writes = 0
        self.trace = []
        self._lock = threading.Lock()

    def record(self, event):
        with self._lock:
            self.trace.append(event)

    def snapshot_trace(self):
        with self._lock:
            return list(self.trace)


def _copy_payload(payload):
    if isinstance(payload, dict):
        return {k: _copy_payload(v) for k, v in payload.items()}
    if isinstance(payload, tuple):
        return tuple(_copy_payload(v) for v in payload)
    return np.array(payload, copy=True)


class CompensationWorker(threading.Thread):
    """
    Waits for start, works out its current window from its own position
    counter, sums (X A_i) B_i over the window's nonzero slots and signals done.
    """

    def __init__(self, model, schedule, factors, mailbox, cpu_ms=0.0):
        super().__init__(name='compensation-worker', daemon=True)
        self.model = model
        self.schedule = schedule
        self.factors = factors
        self.mailbox = mailbox
        self.cpu_ms = cpu_ms
        self.position = 0
        self.generation = 0
        self._routes = {}
        self._stop_event = threading.Event()

    def stop(self):
        self._stop_event.set()
        self.mailbox.start.set()

    def run(self):
        mb = self.mailbox
        while True:
            while not mb.start.wait(POLL_S):
                if self._stop_event.is_set():
                    return
            mb.start.clear()
            if self._stop_event.is_set():
                return

            step, index = divmod(self.position, len(self.schedule))
            window = self.schedule[index]
            if index == 0:
                self._routes.clear()
            self.generation += 1
            try:
                t0 = now_ns()
                payload = mb.activation
                t1 = now_ns()
                delta, work = self._compensate(window, payload)
                t2 = now_ns()
                mb.result = delta
                mb.result_generation = self.generation
                mb.result_position = self.position
                mb.result_writes += 1
                t3 = now_ns()
                for lane, a, b in (('comm', t0, t1), ('cpu', t1, t2), ('comm', t2, t3)):
                    mb.record(TraceEvent(step, index, window.window_id, window.kind.value, lane, a, b,
                                         work if lane == 'cpu' else 0))
            except Exception as e:
                mb.diagnostic = f"{window.window_id} (generation {self.generation}): {e!r}"
                logger.error(f"❌ Compensation worker failed at {mb.diagnostic}")
                self._stop_event.set()
            finally:
                self.position += 1
                mb.done.set()
            if self._stop_event.is_set():
                return

    def _compensate(self, window, payload):
        if window.per_expert:
            if window.kind is WindowKind.FFN_UPGATE:
                experts, rows = expert_rows(route_tokens(self.model, window.layer, payload))
                self._routes[window.layer] = experts
                inputs = {e: payload[rows[e]] for e in experts}
            else:
                experts = self._routes[window.layer]
                inputs = {e: silu(payload[e][1]) * payload[e][0] for e in experts}
            members = window.resolve(experts).members
        else:
            inputs = {None: payload}
            members = window.members

        delta, work = {}, 0
        for mid in members:
            f = self.factors.get(mid)
            if f is None or f.rank == 0:
                continue
            delta[mid] = apply(inputs[mid.expert], f)
            work += f.rank
        _hold(self.cpu_ms)
        return delta, work


class CompensatedPipeline:
    """
    Long-lived backbone/compensator pair. Use as a context manager and call
    step() once per decode step. overlap=False waits for the compensator
    before computing the quantized output (no hiding).
    """

    def __init__(self, model, quantized, factors, overlap=True, watchdog_s=DEFAULT_WATCHDOG_S,
                 cpu_ms=0.0, gpu_ms=0.0):
        self.model = model
        self.schedule = build_schedule(model)
        self.table = {m: dequantize(w) if isinstance(w, QuantizedWeight) else np.asarray(w, dtype=np.float64)
                      for m, w in quantized.items()}
        self.overlap = overlap
        self.gpu_ms = gpu_ms
        self.mailbox = Mailbox(watchdog_s)
        self.worker = CompensationWorker(model, self.schedule, factors, self.mailbox, cpu_ms)
        self.steps = 0

    def __enter__(self):
        self.worker.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def close(self):
        if self.worker.is_alive():
            self.worker.stop()
            self.worker.join(timeout=self.mailbox.watchdog_s)

    @property
    def trace(self):
        return self.mailbox.snapshot_trace()

    def step(self, x):
        start = now_ns()
        hidden, logits = forward(self.model, x, self._project)
        self.mailbox.record(TraceEvent(self.steps, -1, 'ITER', 'ALL', 'step', start, now_ns()))
        self.steps += 1
        return hidden, logits

    def _backbone(self, window, inputs):
        t = now_ns()
        out = {mid: inputs[mid.expert] @ self.table[mid] for mid in window.members}
        _hold(self.gpu_ms)
        self.mailbox.record(TraceEvent(self.steps, window.position, window.window_id, window.kind.value,
                                       'gpu', t, now_ns()))
        return out

    def _await_result(self, window):
        mb = self.mailbox
        if not mb.done.wait(mb.watchdog_s):
            self.close()
            raise ProtocolError(f"Rendezvous timed out after {mb.watchdog_s}s at {window.window_id} "
                                f"(generation {mb.generation})")
        if mb.diagnostic:
            self.close()
            raise ProtocolError(f"Compensation worker panicked at {mb.diagnostic}")
        expected = self.steps * len(self.schedule) + window.position
        if mb.result_generation != mb.generation or mb.result_position != expected:
            self.close()
            raise ProtocolError(f"Worker desync at {window.window_id}: generation {mb.result_generation} "
                                f"vs {mb.generation}, position {mb.result_position} vs {expected}")

    def _project(self, window, inputs, aux=None):
        mb = self.mailbox
        opened = now_ns()
        payload = aux if window.per_expert else inputs[None]

        t = now_ns()
        mb.activation = _copy_payload(payload)
        mb.generation += 1
        mb.activation_writes += 1
        mb.start.set()
        self._comm(window, t)

        y_hat = self._backbone(window, inputs) if self.overlap else None
        self._await_result(window)

        t = now_ns()
        delta = mb.result
        mb.result = None
        mb.done.clear()
        self._comm(window, t)

        if y_hat is None:
            y_hat = self._backbone(window, inputs)
        for mid, d in delta.items():
            if mid not in y_hat:
                self.close()
                raise ProtocolError(f"Compensator returned {mid} outside window {window.window_id}")
            y_hat[mid] = y_hat[mid] + d
        mb.record(TraceEvent(self.steps, window.position, window.window_id, window.kind.value,
                             'window', opened, now_ns()))
        return y_hat

    def _comm(self, window, t):
        self.mailbox.record(TraceEvent(self.steps, window.position, window.window_id, window.kind.value,
                                       'comm', t, now_ns()))


def run_pipelined(model, quantized, factor_pool, plan, x, overlap=True, watchdog_s=DEFAULT_WATCHDOG_S,
                  cpu_ms=0.0, gpu_ms=0.0):
    """One pipelined forward; returns ((hidden, logits), per-window profile records)"""
    factors = select_factors(factor_pool, plan.ranks)
    with CompensatedPipeline(model, quantized, factors, overlap, watchdog_s, cpu_ms, gpu_ms) as pipe:
        output = pipe.step(x)
    return output, profile_overlap(pipe.trace)


def decode(step, embed, x, steps):
    """
    Synthetic autoregressive loop: each step's argmax token selects the
    embedding row fed to the next step. step maps an input batch to
    (hidden, logits); returns the per-step hidden outputs.
    """
    outputs = []
    for _ in range(steps):
        hidden, logits = step(x)
        outputs.append(hidden)
        token = int(np.argmax(logits[-1]))
        x = embed[token][None, :].astype(np.float64)
    return outputs


def _intersection_ns(spans_a, spans_b):
    total = 0
    for a in spans_a:
        for b in spans_b:
            total += max(0, min(a.end_ns, b.end_ns) - max(a.start_ns, b.start_ns))
    return total


def _span_sum(spans):
    return sum(s.end_ns - s.start_ns for s in spans)


def profile_overlap(trace):
    """
    Per-window records (gpu, cpu, comm span sums; overlap = gpu/cpu
    intersection) and one iteration record per step summing its windows.
    """
    steps = {}
    windows = defaultdict(lambda: defaultdict(list))
    for ev in trace:
        if ev.lane not in LANES or ev.end_ns < ev.start_ns:
            raise ProtocolError(f"Malformed trace event {ev}")
        if ev.lane == 'step':
            steps[ev.step] = ev
        else:
            windows[(ev.step, ev.position)][ev.lane].append(ev)

    per_step = defaultdict(list)
    for (step, position), lanes in sorted(windows.items()):
        if len(lanes['window']) != 1:
            raise ProtocolError(f"Malformed trace: step {step} position {position} has no single window span")
        span = lanes['window'][0]
        per_step[step].append(ProfileRecord(
            scope='window',
            window=span.window_id,
            total_ms=(span.end_ns - span.start_ns) / NS_PER_MS,
            cpu_ms=_span_sum(lanes['cpu']) / NS_PER_MS,
            gpu_ms=_span_sum(lanes['gpu']) / NS_PER_MS,
            comm_ms=_span_sum(lanes['comm']) / NS_PER_MS,
            overlap_ms=_intersection_ns(lanes['gpu'], lanes['cpu']) / NS_PER_MS,
            step=step,
        ))

    records = []
    for step in sorted(set(steps) | set(per_step)):
        if step not in steps:
            raise ProtocolError(f"Malformed trace: step {step} has no step span")
        rows = per_step[step]
        ev = steps[step]
        records.append(ProfileRecord(
            scope='iteration',
            window='ALL',
            total_ms=(ev.end_ns - ev.start_ns) / NS_PER_MS,
            cpu_ms=sum(r.cpu_ms for r in rows),
            gpu_ms=sum(r.gpu_ms for r in rows),
            comm_ms=sum(r.comm_ms for r in rows),
            overlap_ms=sum(r.overlap_ms for r in rows),
            step=step,
        ))
        records.extend(rows)
    return records


def window_kind_of(window_id):
    return window_id.split('.', 1)[1] if '.' in window_id else window_id


def summarize_profile(records, details=True):
    """
    Latency-breakdown table: the mean iteration row, then per window kind
    (summed over layers within a step, averaged over steps), then optional
    per-window detail rows averaged over steps.
    """
    if not records:
        return []
    df = pd.DataFrame([asdict(r) for r in records])
    summary = []

    iterations = df[df['scope'] == 'iteration']
    if not iterations.empty:
        means = iterations[TIME_COLUMNS].mean()
        summary.append(ProfileRecord('iteration', 'ALL', *(float(means[c]) for c in TIME_COLUMNS)))

    windows = df[df['scope'] == 'window'].copy()
    if not windows.empty:
        windows['kind'] = windows['window'].map(window_kind_of)
        per_kind = windows.groupby(['step', 'kind'])[TIME_COLUMNS].sum().groupby('kind').mean()
        for kind in WINDOW_ORDER:
            if kind.value in per_kind.index:
                row = per_kind.loc[kind.value]
                summary.append(ProfileRecord('window', kind.value, *(float(row[c]) for c in TIME_COLUMNS)))
        if details:
            per_window = windows.groupby('window', sort=False)[TIME_COLUMNS].mean()
            for window_id, row in per_window.iterrows():
                summary.append(ProfileRecord('detail', window_id, *(float(row[c]) for c in TIME_COLUMNS)))
    return summary


@dataclass
class TimingSamples:
    probe: list      # (window work rank, median cpu_ms)
    comm: dict       # WindowKind -> [ms]
    gpu: dict        # WindowKind -> [ms]


def probe_plan(model, factor_pool, rank):
    """Rank r on the first slot of every window (of every expert in MoE windows), zero elsewhere"""
    ranks = {}
    for mid in model.matrix_ids():
        cap = factor_pool[mid].rank if mid in factor_pool else 0
        ranks[mid] = min(rank, cap) if mid.slot in PROBE_SLOTS else 0
    return ranks


def probe_timing(model, quantized, factor_pool, ranks, x, reps=10, warmup=3, watchdog_s=DEFAULT_WATCHDOG_S,
                 gpu_ms=0.0):
    """
    Run warmup + reps steps per probe rank; warmup steps are discarded.
    gpu_ms adds a fixed backbone cost per window, standing in for a slower device.
    Returns the median compensator latency for each observed window work
    rank plus per-kind backbone and communication samples.
    """
    cpu_by_rank = defaultdict(list)
    comm, gpu = defaultdict(list), defaultdict(list)
    for rank in ranks:
        factors = select_factors(factor_pool, probe_plan(model, factor_pool, rank))
        with CompensatedPipeline(model, quantized, factors, watchdog_s=watchdog_s, gpu_ms=gpu_ms) as pipe:
            for _ in range(warmup + reps):
                pipe.step(x)

        lanes = defaultdict(lambda: defaultdict(list))
        for ev in pipe.trace:
            if ev.step >= warmup and ev.lane != 'step':
                lanes[(ev.step, ev.position)][ev.lane].append(ev)
        for spans in lanes.values():
            kind = WindowKind(spans['window'][0].kind)
            comm[kind].append(_span_sum(spans['comm']) / NS_PER_MS)
            gpu[kind].append(_span_sum(spans['gpu']) / NS_PER_MS)
            work = sum(ev.rank for ev in spans['cpu'])
            cpu_by_rank[work].append(_span_sum(spans['cpu']) / NS_PER_MS)
        logger.info(f"📊 Probed rank {rank} over {reps} steps")

    probe = [(work, float(np.median(v))) for work, v in sorted(cpu_by_rank.items())]
    return TimingSamples(probe=probe, comm=dict(comm), gpu=dict(gpu))
