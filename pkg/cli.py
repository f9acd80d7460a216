#!/usr/bin/env python3
"""
Compensated Inference - command line
fixture | calibrate | allocate | run | perturb | report, each reading and
writing hash-stamped files under the output directory.
"""

import argparse
import hashlib
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

from allocator import (
    RankPlan,
    TimingModel,
    allocate_plan,
    calibrate_r_std,
    demote,
    fit_timing,
    uniform_plan,
)
from artifact_schema import (
    ARTIFACT_VERSION,
    PERTURB_COLUMNS,
    REFERENCE_LATENCY_CSV,
    parse_profile,
    read_fixture,
    read_json,
    read_profile,
    render_profile,
    render_table,
    require_hash,
    sha256_file,
    write_fixture,
    write_json,
)
from compensator import ResidualSpectrum, analyze_spectrum, build_factor_pool, select_factors
from config import config_hash, configure_logging, load_run_config, model_hash
from errors import CompInferError, ConfigError, NumericError, ProvenanceError
from pipeline import (
    CompensatedPipeline,
    decode,
    probe_timing,
    profile_overlap,
    summarize_profile,
)
from quantizer import quantize, residual
from sensitivity import (
    build_calibration_set,
    distribution_from_logits,
    kl_divergence,
    output_distribution,
    sensitivity_report,
)
from toymodel import WINDOW_ORDER, MatrixId, WindowKind, build_synthetic, forward_compensated_sequential, routing_statistics

logger = logging.getLogger('compinfer')

FIXTURE_FILE = 'fixture.bin'
CALIBRATION_FILE = 'calibration.json'
PLAN_FILE = 'plan.json'
PROFILE_FILE = 'profile.csv'
PERTURB_FILE = 'perturb.csv'
REPORT_FILE = 'report.txt'

EQUIVALENCE_TOL = 1e-5
THROUGHPUT_STEPS = 8
PERTURB_ATTEMPTS = 50


def _out_path(cfg, name):
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {cfg.out_dir}: {e}") from e
    return os.path.join(cfg.out_dir, name)


def _write_text(path, text):
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    except OSError as e:
        raise ConfigError(f"Cannot write {path}: {e}") from e
    return sha256_file(path)


def _load_fixture(cfg, path):
    model, fixture_hash = read_fixture(path)
    require_hash('Fixture/config model', model_hash(cfg.model), model_hash(model.spec))
    return model, fixture_hash


def _quant_doc(quant):
    return {'bits': quant.bits, 'group_size': quant.group_size}


def _require_settings(label, recorded, cfg, keys=('quant', 'tau')):
    """Quantization settings an upstream file was built with must match the active config"""
    active = {'quant': _quant_doc(cfg.quant), 'tau': cfg.tau}
    for key in keys:
        if recorded.get(key) != active[key]:
            raise ProvenanceError(f"{label} was built with {key}={recorded.get(key)!r}, "
                                  f"active config has {key}={active[key]!r}")


def _quantize_all(model, quant):
    quantized = {mid: quantize(w, quant) for mid, w in model.weights.items()}
    residuals = {mid: residual(model.weights[mid], q) for mid, q in quantized.items()}
    return quantized, residuals


def _outputs_checksum(outputs):
    h = hashlib.sha256()
    for out in outputs:
        h.update(np.ascontiguousarray(out, dtype=np.float64).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# fixture
# ----------------------------------------------------------------------------

def cmd_fixture(cfg):
    """Build and serialize the synthetic model; summarize planted-cut recovery"""
    model = build_synthetic(cfg.model)
    path = _out_path(cfg, FIXTURE_FILE)
    try:
        fixture_hash = write_fixture(model, path)
    except OSError as e:
        raise ConfigError(f"Cannot write fixture {path}: {e}") from e

    _, residuals = _quantize_all(model, cfg.model.plant_quant)
    recovered = sum(
        1 for mid, dw in residuals.items()
        if (analyze_spectrum(dw, cfg.tau, mid).salient_cut or 0) == model.planted[mid]
    )
    logger.info(f"✅ Fixture written: {path}")
    logger.info(f"   🔑 sha256: {fixture_hash}")
    logger.info(f"   🧱 Layers: {', '.join(cfg.model.layers) or '(none)'}; matrices: {len(model.weights)}")
    logger.info(f"   🎯 Planted cut {cfg.model.planted_rank} recovered on {recovered}/{len(residuals)} matrices")
    return {'path': path, 'fixture_hash': fixture_hash, 'recovered': recovered, 'matrices': len(residuals)}


# ----------------------------------------------------------------------------
# calibrate
# ----------------------------------------------------------------------------

def _spectrum_doc(spectrum, planted):
    return {
        'sigma': [float(s) for s in spectrum.sigma_raw],
        'salient_cut': spectrum.salient_cut,
        'phi': spectrum.phi,
        'planted': planted,
    }


def cmd_calibrate(cfg, fixture_path):
    """quantize -> residual -> spectra, sensitivity probes, routing statistics, timing probes"""
    model, fixture_hash = _load_fixture(cfg, fixture_path)
    quantized, residuals = _quantize_all(model, cfg.quant)
    spectra = {mid: analyze_spectrum(dw, cfg.tau, mid) for mid, dw in residuals.items()}
    logger.info(f"📊 Analyzed {len(spectra)} residual spectra")

    calib = build_calibration_set(cfg.model.hidden, cfg.calib_samples, cfg.calib_tokens, cfg.calib_seed)
    report = sensitivity_report(model, quantized, calib, cfg.resolved_top_layers, cfg.sensitivity_scope)
    gates = routing_statistics(model, calib.inputs)

    pool = build_factor_pool(residuals, max(cfg.probe_ranks))
    samples = probe_timing(model, quantized, pool, cfg.probe_ranks, calib.inputs[0],
                           reps=cfg.probe_reps, warmup=cfg.probe_warmup, watchdog_s=cfg.watchdog_s,
                           gpu_ms=cfg.probe_backbone_ms)
    timing = fit_timing(samples.probe, samples.comm, samples.gpu)
    logger.info(f"⏱️  k_slope {timing.k_slope:.3g} ms/rank, intercept {timing.t_cpu0:.3g} ms, "
                f"residual {timing.fit_residual:.1%}")

    timing_doc = timing.to_dict()
    timing_doc['deterministic'] = False
    timing_doc['samples'] = [[int(r), float(t)] for r, t in samples.probe]
    doc = {
        'version': ARTIFACT_VERSION,
        'kind': 'calibration',
        'fixture_hash': fixture_hash,
        'config_hash': config_hash(cfg),
        'model_hash': model_hash(model.spec),
        'quant': _quant_doc(cfg.quant),
        'tau': cfg.tau,
        'spectra': {str(m): _spectrum_doc(s, model.planted.get(m)) for m, s in sorted(spectra.items())},
        'sensitivity': report.to_dict(),
        'expert_gates': {str(layer): [float(g) for g in gates[layer]] for layer in sorted(gates)},
        'timing': timing_doc,
    }
    path = _out_path(cfg, CALIBRATION_FILE)
    calibration_hash = write_json(path, doc)
    logger.info(f"✅ Calibration written: {path} (sha256 {calibration_hash[:12]})")
    return doc


# ----------------------------------------------------------------------------
# allocate
# ----------------------------------------------------------------------------

def spectra_from_doc(doc):
    spectra = {}
    for name, s in doc['spectra'].items():
        mid = MatrixId.parse(name)
        sigma = np.asarray(s['sigma'], dtype=np.float64)
        sigma_hat = sigma / sigma[0] if sigma.size and sigma[0] > 0 else np.zeros_like(sigma)
        spectra[mid] = ResidualSpectrum(mid, sigma, sigma_hat, s['salient_cut'], float(s['phi']))
    return spectra


def window_rank_caps(spectra):
    """Per window kind, the largest total rank any window of that kind can hold"""
    totals = {}
    for mid, s in spectra.items():
        totals[mid.window_id] = totals.get(mid.window_id, 0) + s.n
    caps = {}
    for window_id, total in totals.items():
        kind = WindowKind(window_id.split('.', 1)[1])
        caps[kind] = max(caps.get(kind, 0), total)
    return caps


def standard_ranks(cfg, doc, spectra):
    if cfg.r_std_override is not None:
        return {WindowKind(k): int(v) for k, v in cfg.r_std_override.items()}
    timing = TimingModel.from_dict(doc['timing'])
    caps = window_rank_caps(spectra)
    return {kind: calibrate_r_std(timing, kind, cap=caps.get(kind)) for kind in WINDOW_ORDER if kind in caps}


def cmd_allocate(cfg, calibration_path, fixed_rank=None):
    doc = read_json(calibration_path, 'calibration')
    require_hash('Calibration/config model', model_hash(cfg.model), doc['model_hash'])
    _require_settings('Calibration', doc, cfg)
    spectra = spectra_from_doc(doc)
    r_std = standard_ranks(cfg, doc, spectra)
    provenance = {
        'calibration_hash': sha256_file(calibration_path),
        'config_hash': config_hash(cfg),
        'fixture_hash': doc['fixture_hash'],
        'model_hash': doc['model_hash'],
        'quant': doc['quant'],
        'tau': doc['tau'],
    }

    if fixed_rank is not None:
        if fixed_rank < 0:
            raise ConfigError(f"--fixed-rank must be >= 0, got {fixed_rank}")
        plan = uniform_plan(sorted(spectra), fixed_rank, cfg.k0, {m: s.n for m, s in spectra.items()}, provenance)
        plan.r_std = r_std
    else:
        sens = doc['sensitivity']
        s_matrix = {MatrixId.parse(k): float(v) for k, v in sens['s_matrix'].items()}
        s_layer = {int(k): float(v) for k, v in sens['s_layer'].items()}
        gates = {int(k): np.asarray(v) for k, v in doc['expert_gates'].items()}
        plan = allocate_plan(spectra, s_matrix, s_layer, r_std, cfg.k0, gates, dict(provenance, mode='dynamic'))

    path = _out_path(cfg, PLAN_FILE)
    plan_hash = write_json(path, plan.to_dict())
    logger.info(f"✅ Plan written: {path} (sha256 {plan_hash[:12]})")
    logger.info(f"   📐 r_std: {', '.join(f'{k.value}={v}' for k, v in sorted(r_std.items()))}")
    return plan


# ----------------------------------------------------------------------------
# run
# ----------------------------------------------------------------------------

def _load_plan(cfg, path, fixture_hash):
    plan = RankPlan.from_dict(read_json(path, 'plan'))
    require_hash('Plan/fixture', plan.provenance.get('fixture_hash', ''), fixture_hash)
    _require_settings('Plan', plan.provenance, cfg, keys=('quant',))
    return plan


def _factors_for(plan, residuals):
    top = max(plan.ranks.values(), default=0)
    needed = {m: dw for m, dw in residuals.items() if plan.rank(m) > 0}
    return select_factors(build_factor_pool(needed, top), plan.ranks) if top else {}


def cmd_run(cfg, fixture_path, plan_path, steps=1, serialize=False, verify=False):
    """Pipelined decode for `steps` tokens; writes the latency profile and output checksum"""
    if steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {steps}")
    model, fixture_hash = _load_fixture(cfg, fixture_path)
    plan = _load_plan(cfg, plan_path, fixture_hash)
    quantized, residuals = _quantize_all(model, cfg.quant)
    factors = _factors_for(plan, residuals)
    x0 = model.embed[0][None, :].astype(np.float64)

    with CompensatedPipeline(model, quantized, factors, overlap=not serialize, watchdog_s=cfg.watchdog_s) as pipe:
        outputs = decode(pipe.step, model.embed, x0, steps)
    checksum = _outputs_checksum(outputs)

    if verify:
        reference = decode(lambda x: forward_compensated_sequential(model, quantized, factors, x),
                           model.embed, x0, steps)
        worst = max(float(np.max(np.abs(a - b))) for a, b in zip(outputs, reference))
        if worst > EQUIVALENCE_TOL:
            raise NumericError(f"Pipelined output deviates from the sequential reference by {worst:.3g}")
        logger.info(f"✅ Sequential reference matched (max |diff| {worst:.3g})")

    summary = summarize_profile(profile_overlap(pipe.trace))
    provenance = {
        'fixture_hash': fixture_hash,
        'plan_hash': sha256_file(plan_path),
        'steps': steps,
        'mode': 'serialized' if serialize else 'overlapped',
        'checksum': checksum,
        'deterministic': False,
    }
    path = _out_path(cfg, PROFILE_FILE)
    _write_text(path, render_profile(summary, provenance))
    iteration = summary[0] if summary else None
    logger.info(f"✅ Ran {steps} decode steps; output checksum {checksum[:16]}")
    if iteration is not None:
        logger.info(f"   ⏱️  {iteration.total_ms:.3f} ms/step, overlap {iteration.overlap_ms:.3f} ms, "
                    f"exposed {iteration.exposed_ms:.3f} ms")
    return {'checksum': checksum, 'profile': summary, 'path': path}


# ----------------------------------------------------------------------------
# perturb
# ----------------------------------------------------------------------------

def neighbor_plan(ranks, caps, k0, rng):
    """
    Move one aligned step of rank from a matrix to a matrix in another window,
    keeping the total unchanged. Returns (ranks, donor, receiver, delta) or None.
    """
    base = 2 ** k0
    donors = [m for m in sorted(ranks) if ranks[m] > 0]
    for _ in range(PERTURB_ATTEMPTS):
        if not donors:
            return None
        donor = donors[rng.integers(len(donors))]
        delta = ranks[donor] - demote(ranks[donor], k0)
        receivers = [
            m for m in sorted(ranks)
            if m.window_id != donor.window_id
            and ((ranks[m] == 0 and delta == base) or (ranks[m] == delta and 2 * delta <= caps[m]))
        ]
        if not receivers:
            continue
        receiver = receivers[rng.integers(len(receivers))]
        moved = dict(ranks)
        moved[donor] -= delta
        moved[receiver] += delta
        return moved, donor, receiver, delta
    return None


def _proxy_kl(model, quantized, factors, inputs):
    """Mean KL(full || compensated) over held-out batches"""
    values = []
    for x in inputs:
        _, logits = forward_compensated_sequential(model, quantized, factors, x)
        values.append(kl_divergence(output_distribution(model, x), distribution_from_logits(logits)))
    return float(np.mean(values))


def _throughput(model, quantized, factors, cfg):
    x0 = model.embed[0][None, :].astype(np.float64)
    with CompensatedPipeline(model, quantized, factors, watchdog_s=cfg.watchdog_s) as pipe:
        start = time.perf_counter()
        decode(pipe.step, model.embed, x0, THROUGHPUT_STEPS)
        elapsed = time.perf_counter() - start
    return THROUGHPUT_STEPS / elapsed if elapsed > 0 else 0.0


def cmd_perturb(cfg, fixture_path, plan_path, trials=20):
    if trials < 0:
        raise ConfigError(f"--trials must be >= 0, got {trials}")
    model, fixture_hash = _load_fixture(cfg, fixture_path)
    plan = _load_plan(cfg, plan_path, fixture_hash)
    provenance = {'fixture_hash': fixture_hash, 'plan_hash': sha256_file(plan_path), 'trials': trials}
    rows = []

    if trials > 0:
        quantized, residuals = _quantize_all(model, cfg.quant)
        pool = build_factor_pool(residuals)
        caps = {m: pool[m].rank for m in pool}
        held_out = build_calibration_set(cfg.model.hidden, cfg.calib_samples, cfg.calib_tokens, cfg.calib_seed + 1)
        rng = np.random.default_rng(cfg.model.seed)

        def evaluate(ranks):
            factors = select_factors(pool, ranks)
            return _proxy_kl(model, quantized, factors, held_out.inputs), _throughput(model, quantized, factors, cfg)

        ref_kl, ref_tps = evaluate(plan.ranks)
        rows.append([0, '-', '-', 0, ref_kl, 0.0, ref_tps, 0.0])
        for trial in range(1, trials + 1):
            moved = neighbor_plan(plan.ranks, caps, plan.k0, rng)
            if moved is None:
                logger.warning(f"⚠️  No admissible neighbor plan for trial {trial}; stopping")
                break
            ranks, donor, receiver, delta = moved
            kl, tps = evaluate(ranks)
            rows.append([trial, str(donor), str(receiver), delta, kl, kl - ref_kl, tps, tps - ref_tps])
            logger.info(f"   🔀 Trial {trial}: {donor} -> {receiver} ({delta}), dKL {kl - ref_kl:+.3g}")

    path = _out_path(cfg, PERTURB_FILE)
    _write_text(path, render_table(rows, PERTURB_COLUMNS, provenance))
    logger.info(f"✅ Perturbation study written: {path} ({max(len(rows) - 1, 0)} trials)")
    return rows


# ----------------------------------------------------------------------------
# report
# ----------------------------------------------------------------------------

def _spectra_section(doc):
    rows = [
        {'matrix': name, 'n': len(s['sigma']), 'salient_cut': s['salient_cut'] or 0,
         'phi': s['phi'], 'planted': s.get('planted')}
        for name, s in sorted(doc['spectra'].items(), key=lambda kv: MatrixId.parse(kv[0]))
    ]
    df = pd.DataFrame(rows)
    lines = ["📊 Residual spectra", df.to_string(index=False, float_format=lambda v: f"{v:.3f}")]
    planted = df.dropna(subset=['planted'])
    if not planted.empty:
        hit = int((planted['salient_cut'] == planted['planted']).sum())
        lines.append(f"Planted cut recovered on {hit}/{len(planted)} matrices")
    return lines, df


def _sensitivity_section(doc):
    sens = doc['sensitivity']
    layers = pd.DataFrame(
        [{'layer': int(k), 'D_layer': v, 'S_layer': sens['s_layer'].get(k)} for k, v in sens['d_layer'].items()]
    )
    lines = ["🔥 Layer sensitivity ranking"]
    if layers.empty:
        lines.append("(no layers)")
    else:
        layers = layers.sort_values(['D_layer', 'layer'], ascending=[False, True])
        lines.append(layers.to_string(index=False, float_format=lambda v: f"{v:.4g}"))
        lines.append(f"Top set (K={sens['K']}): {sens['top_set']}")
    matrices = sorted(sens['d_matrix'].items(), key=lambda kv: (-kv[1], kv[0]))[:10]
    lines.append("Most sensitive matrices: " + ', '.join(f"{k} ({v:.3g})" for k, v in matrices))
    return lines, layers


def _plan_section(plan):
    rows = [{'layer': m.layer, 'window': m.kind.value, 'rank': r} for m, r in plan.ranks.items()]
    df = pd.DataFrame(rows, columns=['layer', 'window', 'rank'])
    skipped = sum(1 for r in plan.ranks.values() if r == 0)
    lines = [
        "📐 Rank plan",
        f"Total rank {plan.total_rank} over {len(plan.ranks)} matrices; {skipped} skipped",
        f"Mode: {plan.provenance.get('mode', 'dynamic')}",
    ]
    if not df.empty:
        profile = df.pivot_table(index='layer', columns='window', values='rank', aggfunc='sum', fill_value=0)
        profile = profile.reindex(columns=[k.value for k in WINDOW_ORDER if k.value in profile.columns])
        lines.append(profile.to_string())
    return lines, df


def _latency_section(records):
    if not records:
        return ["⏱️  Latency breakdown", "no runs recorded"]
    return ["⏱️  Latency breakdown (ms)", render_profile(records).rstrip('\n')]


def _golden_check():
    records, _ = parse_profile(REFERENCE_LATENCY_CSV)
    problems = [p for r in records for p in r.violations()]
    ok = render_profile(records) == REFERENCE_LATENCY_CSV and not problems
    return f"Reference latency table round-trip: {'OK' if ok else 'FAILED ' + '; '.join(problems)}"


def export_workbook(path, sheets):
    """Write one sheet per table; fall back to CSV files when openpyxl is unavailable"""
    try:
        with pd.ExcelWriter(path, engine='openpyxl') as writer:
            for name, df in sheets.items():
                df.to_excel(writer, sheet_name=name, index=False)
        return [path]
    except ImportError:
        logger.warning("⚠️  Excel export requires openpyxl. Using CSV export instead.")
        stem = os.path.splitext(path)[0]
        written = []
        for name, df in sheets.items():
            csv_path = f"{stem}_{name}.csv"
            df.to_csv(csv_path, index=False, lineterminator='\n')
            written.append(csv_path)
        return written


def cmd_report(cfg, calibration_path=None, profile_path=None, plan_path=None, xlsx=False):
    sections, sheets = [], {}
    plan = None
    if calibration_path:
        doc = read_json(calibration_path, 'calibration')
        lines, sheets['spectra'] = _spectra_section(doc)
        sections.append(lines)
        lines, sheets['sensitivity'] = _sensitivity_section(doc)
        sections.append(lines)
    if plan_path:
        plan = RankPlan.from_dict(read_json(plan_path, 'plan'))
        if calibration_path:
            require_hash('Plan/calibration', plan.provenance.get('calibration_hash', ''),
                         sha256_file(calibration_path))
        lines, sheets['plan'] = _plan_section(plan)
        sections.append(lines)

    records = []
    if profile_path:
        records, provenance = read_profile(profile_path)
        if plan is not None:
            require_hash('Profile/plan', provenance.get('plan_hash', ''), sha256_file(plan_path))
    sections.append(_latency_section(records))
    if records:
        sheets['latency'] = pd.DataFrame([r.as_row() for r in records])
    sections.append([_golden_check()])

    text = '\n\n'.join('\n'.join(lines) for lines in sections) + '\n'
    path = _out_path(cfg, REPORT_FILE)
    _write_text(path, text)
    print(text, end='')
    if xlsx and sheets:
        written = export_workbook(_out_path(cfg, 'report.xlsx'), sheets)
        logger.info(f"📑 Report tables exported: {', '.join(written)}")
    return text


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='compinfer', description='Quantization-error compensation workflow')
    parser.add_argument('--config', help='JSON run config (defaults from environment)')
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--seed', type=int, help='model seed override')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('fixture', help='build and serialize the synthetic model')

    p = sub.add_parser('calibrate', help='spectra, sensitivity and timing probes')
    p.add_argument('--fixture')

    p = sub.add_parser('allocate', help='write a rank plan from a calibration artifact')
    p.add_argument('--calibration')
    p.add_argument('--fixed-rank', type=int, help='uniform baseline plan at this rank')

    p = sub.add_parser('run', help='pipelined decode with profiling')
    p.add_argument('--fixture')
    p.add_argument('--plan')
    p.add_argument('--steps', type=int, default=1)
    p.add_argument('--serialize', action='store_true', help='compensate before the backbone (no overlap)')
    p.add_argument('--verify', action='store_true', help='check against the sequential reference')

    p = sub.add_parser('perturb', help='neighbor-plan perturbation study')
    p.add_argument('--fixture')
    p.add_argument('--plan')
    p.add_argument('--trials', type=int, default=20)

    p = sub.add_parser('report', help='human-readable summary')
    p.add_argument('--calibration')
    p.add_argument('--plan')
    p.add_argument('--profile')
    p.add_argument('--xlsx', action='store_true', help='also export report.xlsx')
    return parser


def dispatch(args):
    cfg = load_run_config(args.config, {'seed': args.seed, 'out_dir': args.out})
    default = lambda name: os.path.join(cfg.out_dir, name)

    if args.command == 'fixture':
        return cmd_fixture(cfg)
    if args.command == 'calibrate':
        return cmd_calibrate(cfg, args.fixture or default(FIXTURE_FILE))
    if args.command == 'allocate':
        return cmd_allocate(cfg, args.calibration or default(CALIBRATION_FILE), args.fixed_rank)
    if args.command == 'run':
        return cmd_run(cfg, args.fixture or default(FIXTURE_FILE), args.plan or default(PLAN_FILE),
                       args.steps, args.serialize, args.verify)
    if args.command == 'perturb':
        return cmd_perturb(cfg, args.fixture or default(FIXTURE_FILE), args.plan or default(PLAN_FILE), args.trials)
    if args.command == 'report':
        return cmd_report(cfg, args.calibration, args.profile, args.plan, args.xlsx)
    raise ConfigError(f"Unknown command {args.command!r}")


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except CompInferError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
