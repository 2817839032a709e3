import os
import json
import time
import logging
import subprocess
from datetime import datetime
from dataclasses import dataclass, field, replace, asdict

import numpy as np
import pandas as pd

from baselines import SCHEMES, papr_study, run_baseline
from ofdm_im import TRADEOFF_PATTERNS, detector_candidates, make_code, spectral_efficiency
from sim_device import build_propagation
from system_config import SystemConfig, config_hash, desk_config, save_config
from upgd import (StepSchedule, TrainRun, gen_dataset, make_context, pgd, Backtracking,
                  solve_phases, solver_curves, split_dataset, train_schedule)

# Configuration
SCHEMA_VERSION = 1
EXPERIMENTS = ('convergence', 'layers-sweep', 'ber-vs-pt', 'sumrate-vs-pt', 'papr', 'im-tradeoff')
SCALES = ('desk', 'paper')
TARGET_BER = 1e-3
LAYER_SWEEP = {'desk': (1, 2, 3, 4, 5), 'paper': tuple(range(1, 11))}
CONVERGENCE_TOLERANCE = 0.01

# Published throughput/complexity rows for K=4, Nc=16, Ncp=8, BPSK
TRADEOFF_EXPECTED = {
    (2, 1): (2.67, 32),
    (4, 1): (2.0, 32),
    (4, 2): (2.67, 96),
    (4, 3): (3.33, 128),
    (8, 4): (3.33, 2240),
}

REQUIRED_COLUMNS = {
    'ber_vs_pt.csv': ['scheme', 'Pt_dBm', 'BER', 'errors', 'bits'],
    'sumrate_vs_pt.csv': ['scheme', 'Pt_dBm', 'sum_rate'],
    'papr.csv': ['scheme', 'papr_db'],
    'convergence.csv': ['context', 'stage', 'upgd', 'fixed', 'backtracking'],
    'layers_sweep.csv': ['seed', 'L', 'final_loss'],
    'im_tradeoff.csv': ['N', 'V', 'spectral_efficiency', 'candidates'],
}

@dataclass
class ExperimentSpec:
    experiment: str
    scale: str = 'desk'
    trials: int = 200
    seeds: tuple = (0,)
    pt_min: float = -10.0
    pt_max: float = 30.0
    pt_step: float = 5.0
    out: str = 'results'
    config: SystemConfig = None
    workers: int = 1
    epochs: int = 20
    contexts: int = 200
    symbols: int = 1000
    iterations: int = 50
    min_errors: int = 100
    schedule_path: str = None
    tradeoff_ber: bool = False
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment '{self.experiment}', expected one of {EXPERIMENTS}")
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale '{self.scale}', expected one of {SCALES}")
        if self.trials < 1:
            raise ValueError(f"trials must be at least 1, got {self.trials}")
        if self.pt_min > self.pt_max:
            raise ValueError(f"Pt sweep bounds out of order: {self.pt_min} > {self.pt_max}")
        if self.pt_step <= 0:
            raise ValueError(f"Pt step must be positive, got {self.pt_step}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def pt_sweep(self):
        return [float(p) for p in np.arange(self.pt_min, self.pt_max + self.pt_step / 2, self.pt_step)]

    def system_config(self):
        """An explicit config wins; otherwise the scale preset"""
        if self.config is not None:
            return self.config
        return desk_config() if self.scale == 'desk' else SystemConfig()

def git_describe():
    """Repository revision recorded in the manifest, or 'unknown' outside a checkout"""
    try:
        result = subprocess.run(['git', 'describe', '--always', '--dirty'], capture_output=True,
                                text=True, check=False)
    except OSError:
        return 'unknown'
    return result.stdout.strip() or 'unknown'

def _write_csv(df, out, name, files):
    path = os.path.join(out, name)
    df.to_csv(path, index=False)
    files.append(name)
    logging.info(f"Saved {len(df)} rows to {path}")
    return path

def _solver(spec, cfg):
    if spec.schedule_path:
        schedule = StepSchedule.load(spec.schedule_path)
        logging.info(f"Using trained {schedule.T}-stage schedule from {spec.schedule_path}")
        return lambda ctx: solve_phases(ctx, schedule=schedule)
    return lambda ctx: solve_phases(ctx, iterations=cfg.T)

def _pooled(df, value):
    """Mean of `value` per (scheme, Pt); BER is pooled over seeds by error and bit counts"""
    grouped = df.groupby(['scheme', 'Pt_dBm'])
    if value == 'BER':
        totals = grouped[['errors', 'bits']].sum()
        return (totals['errors'] / totals['bits']).rename('BER').reset_index()
    return grouped[value].mean().reset_index()

def pt_at_ber(pt, ber, target=TARGET_BER):
    """Pt where the BER curve crosses `target`, interpolating log10(BER) linearly in dBm"""
    order = np.argsort(pt)
    pt = np.asarray(pt, dtype=float)[order]
    ber = np.asarray(ber, dtype=float)[order]
    for j in range(len(pt) - 1):
        high, low = ber[j], ber[j + 1]
        if not high >= target >= low or high <= 0:
            continue
        if low <= 0:
            return float(pt[j + 1])
        if high == low:
            return float(pt[j])
        fraction = (np.log10(high) - np.log10(target)) / (np.log10(high) - np.log10(low))
        return float(pt[j] + fraction * (pt[j + 1] - pt[j]))
    return float('nan')

def run_convergence(spec, cfg, out, files):
    """Train the schedule and compare the per-stage losses of every solver"""
    prop = build_propagation(cfg)
    dataset = gen_dataset(cfg, spec.contexts, spec.seeds[0], prop, progress=True)
    hyper = TrainRun(epochs=spec.epochs, seed=spec.seeds[0], T=cfg.T, workers=spec.workers)
    schedule, hyper = train_schedule(dataset, hyper)
    schedule.save(os.path.join(out, 'schedule.txt'))
    files.append('schedule.txt')
    _write_csv(hyper.history(), out, 'training_history.csv', files)

    validation = split_dataset(dataset, hyper.split)[1] or dataset
    rows = []
    for index, ctx in enumerate(validation):
        curves = solver_curves(ctx, schedule, iterations=spec.iterations)
        for stage in range(spec.iterations + 1):
            upgd = np.nan
            if stage == 0:
                upgd = curves['start']
            elif stage <= schedule.T:
                upgd = curves['upgd'][stage - 1]
            rows.append({
                'context': index,
                'seed': ctx.seed,
                'stage': stage,
                'upgd': upgd,
                'fixed': curves['start'] if stage == 0 else curves['fixed'][stage - 1],
                'backtracking': curves['start'] if stage == 0 else curves['backtracking'][stage - 1],
            })
    df = pd.DataFrame(rows)
    _write_csv(df, out, 'convergence.csv', files)

    monotone = all(np.all(np.diff(group['backtracking'].to_numpy()) <= 1e-12 * np.abs(group['backtracking']).max())
                   for _, group in df.groupby('context'))
    at_t = df[df['stage'] == schedule.T]
    final = df[df['stage'] == spec.iterations]
    upgd_final = at_t['upgd'].mean()
    fixed_long = final['fixed'].mean()
    return {
        'backtracking_monotone': bool(monotone),
        'upgd_beats_fixed_at_T': bool((at_t['upgd'].to_numpy() <= at_t['fixed'].to_numpy()).mean() >= 0.8),
        'upgd_close_to_fixed_long': bool(upgd_final <= fixed_long + 0.05 * abs(fixed_long)),
    }

def run_layers_sweep(spec, cfg, out, files):
    """Worst-link SINR after backtracking PGD as the number of layers grows"""
    rows = []
    for L in LAYER_SWEEP[spec.scale]:
        cfg_l = replace(cfg, L=L)
        prop = build_propagation(cfg_l)
        for seed in spec.seeds:
            ctx = make_context(cfg_l, seed, prop)
            trajectory = pgd(ctx, None, cfg.T, Backtracking())
            final = trajectory.losses[-1] if trajectory.losses else trajectory.start_loss
            rows.append({'seed': seed, 'L': L, 'start_loss': trajectory.start_loss, 'final_loss': final,
                         'min_sinr_db': 10 * np.log10(max(-final, np.finfo(float).tiny))})
            logging.debug(f"L={L} seed={seed}: final loss {final:.4e}")
    df = pd.DataFrame(rows).sort_values(['L', 'seed']).reset_index(drop=True)
    _write_csv(df, out, 'layers_sweep.csv', files)

    by_seed = df.pivot(index='seed', columns='L', values='final_loss')
    checks = {}
    if 1 in by_seed and 3 in by_seed:
        checks['three_layers_beat_one'] = bool((by_seed[3] < by_seed[1]).mean() >= 0.8)
    return checks

def _run_schemes(spec, cfg, min_errors):
    prop = build_propagation(cfg)
    solver = _solver(spec, cfg)
    frames = [run_baseline(scheme, cfg, spec.seeds, spec.pt_sweep, prop=prop, solver=solver,
                           min_errors=min_errors, trial_cap=spec.trials, workers=spec.workers)
              for scheme in SCHEMES]
    return pd.concat(frames, ignore_index=True)

def run_ber_vs_pt(spec, cfg, out, files):
    """BER of every scheme across the transmit power sweep"""
    df = _run_schemes(spec, cfg, spec.min_errors)
    _write_csv(df, out, 'ber_vs_pt.csv', files)

    sim = df[(df['scheme'] == 'sim_ofdmim') & (df['errors'] >= spec.min_errors)]
    checks = {'bound_dominates_ber': bool((sim['ci_low'] <= sim['bound']).all()) if len(sim) else None}
    pooled = _pooled(df, 'BER')
    crossings = {scheme: pt_at_ber(group['Pt_dBm'], group['BER']) for scheme, group in pooled.groupby('scheme')}
    sim_pt, zf_pt = crossings.get('sim_ofdmim', np.nan), crossings.get('ofdmim_zf', np.nan)
    checks['sim_gain_over_zf_im'] = bool(sim_pt < zf_pt) if np.isfinite(sim_pt) and np.isfinite(zf_pt) else None
    return checks

def run_sumrate_vs_pt(spec, cfg, out, files):
    """Sum rate of every scheme across the transmit power sweep"""
    df = _run_schemes(spec, cfg, None)
    _write_csv(df, out, 'sumrate_vs_pt.csv', files)
    rates = _pooled(df, 'sum_rate').pivot(index='Pt_dBm', columns='scheme', values='sum_rate')
    return {'sim_sum_rate_above_zf_im': bool((rates['sim_ofdmim'] > rates['ofdmim_zf']).all())}

def run_papr(spec, cfg, out, files):
    """Burst PAPR samples of every scheme"""
    frames = [papr_study(cfg, spec.symbols, seed) for seed in spec.seeds]
    df = pd.concat(frames, ignore_index=True)
    _write_csv(df, out, 'papr.csv', files)
    means = df.groupby('scheme')['papr_db'].mean()
    return {
        'papr_ordering': bool(means['sim_ofdmim'] < means['ofdmim_zf'] < means['ofdm_zf']),
        'ofdm_papr_in_range': bool(6.0 <= means['ofdm_zf'] <= 9.0),
    }

def run_im_tradeoff(spec, cfg, out, files):
    """Spectral efficiency and detector candidates of each (N, V) pattern"""
    rows = []
    for N, V in TRADEOFF_PATTERNS:
        code = make_code(N, V, cfg.Ms)
        rows.append({
            'N': N,
            'V': V,
            'q1': code.q1,
            'q2': code.q2,
            'spectral_efficiency': round(spectral_efficiency(code, cfg.K, cfg.Nc, cfg.Ncp), 2),
            'candidates': detector_candidates(N, V, cfg.Nc // N, cfg.Ms),
        })
    df = pd.DataFrame(rows)
    _write_csv(df, out, 'im_tradeoff.csv', files)

    checks = {}
    if (cfg.K, cfg.Nc, cfg.Ncp, cfg.Ms) == (4, 16, 8, 2):
        checks['tradeoff_table_matches'] = all(
            (row.spectral_efficiency, row.candidates) == TRADEOFF_EXPECTED[(row.N, row.V)]
            for row in df.itertuples())

    if spec.tradeoff_ber:
        solver = _solver(spec, cfg)
        frames = []
        for N, V in TRADEOFF_PATTERNS:
            cfg_nv = replace(cfg, N=N, V=V)
            result = run_baseline('sim_ofdmim', cfg_nv, spec.seeds, spec.pt_sweep, solver=solver,
                                  min_errors=spec.min_errors, trial_cap=spec.trials, workers=spec.workers)
            frames.append(result.assign(N=N, V=V))
        _write_csv(pd.concat(frames, ignore_index=True), out, 'im_tradeoff_ber.csv', files)
    return checks

RUNNERS = {
    'convergence': run_convergence,
    'layers-sweep': run_layers_sweep,
    'ber-vs-pt': run_ber_vs_pt,
    'sumrate-vs-pt': run_sumrate_vs_pt,
    'papr': run_papr,
    'im-tradeoff': run_im_tradeoff,
}

def run(spec):
    """Execute one study and write its CSVs plus manifest.json into spec.out"""
    cfg = spec.system_config()
    os.makedirs(spec.out, exist_ok=True)
    logging.info(f"Running {spec.experiment} at {spec.scale} scale (M={cfg.M}, L={cfg.L}) into {spec.out}")

    start = time.time()
    files = []
    save_config(cfg, os.path.join(spec.out, 'config.conf'))
    files.append('config.conf')
    spec.checks = RUNNERS[spec.experiment](spec, cfg, spec.out, files)
    elapsed = time.time() - start

    manifest = {
        'schema_version': SCHEMA_VERSION,
        'experiment': spec.experiment,
        'scale': spec.scale,
        'config': asdict(cfg),
        'config_hash': config_hash(cfg),
        'seeds': list(spec.seeds),
        'pt_sweep': spec.pt_sweep,
        'trial_cap': spec.trials,
        'git_describe': git_describe(),
        'created': datetime.now().isoformat(timespec='seconds'),
        'wall_time_s': round(elapsed, 3),
        'files': files,
        'checks': spec.checks,
    }
    with open(os.path.join(spec.out, 'manifest.json'), 'w', encoding='utf-8') as handle:
        json.dump(manifest, handle, indent=2)

    for name, passed in spec.checks.items():
        log = logging.info if passed or passed is None else logging.warning
        log(f"Check {name}: {'n/a' if passed is None else ('pass' if passed else 'FAIL')}")
    logging.info(f"Done! {spec.experiment} took {elapsed:.2f} seconds")
    return manifest

def _read(directory, name):
    df = pd.read_csv(os.path.join(directory, name))
    missing = [c for c in REQUIRED_COLUMNS[name] if c not in df.columns]
    if missing:
        raise ValueError(f"{name} is missing columns {missing}")
    return df

def _block(df):
    return "```\n" + df.to_string() + "\n```\n"

def stage_counts(df, tolerance=CONVERGENCE_TOLERANCE):
    """Mean first stage at which each solver gets within tolerance of the long fixed-step loss"""
    counts = {solver: [] for solver in ('upgd', 'fixed', 'backtracking')}
    for _, group in df.sort_values('stage').groupby('context'):
        target = group['fixed'].iloc[-1]
        threshold = target + tolerance * abs(target)
        for solver in counts:
            reached = group.loc[group[solver] <= threshold, 'stage']
            counts[solver].append(reached.iloc[0] if len(reached) else np.nan)
    return pd.Series({solver: np.nanmean(v) if np.any(np.isfinite(v)) else np.nan
                      for solver, v in counts.items()}, name='mean_stages')

def summarize(directory):
    """Markdown report of every result table found in `directory`"""
    present = [name for name in REQUIRED_COLUMNS if os.path.exists(os.path.join(directory, name))]
    if not present:
        return "# Results\n\nno results\n"

    sections = [f"# Results: {directory}\n"]
    if 'ber_vs_pt.csv' in present:
        pooled = _pooled(_read(directory, 'ber_vs_pt.csv'), 'BER')
        sections.append("## BER versus transmit power\n")
        sections.append(_block(pooled.pivot(index='Pt_dBm', columns='scheme', values='BER')))
        crossings = {scheme: pt_at_ber(group['Pt_dBm'], group['BER'])
                     for scheme, group in pooled.groupby('scheme')}
        sections.append(f"## Pt at BER {TARGET_BER:g}\n")
        sections.append(_block(pd.Series(crossings, name='Pt_dBm').to_frame()))
        sim = crossings.get('sim_ofdmim', np.nan)
        for other in ('ofdmim_zf', 'ofdm_zf'):
            gain = crossings.get(other, np.nan) - sim
            sections.append(f"- SIM OFDM-IM gain over {other}: "
                            f"{'n/a' if not np.isfinite(gain) else f'{gain:.2f} dB'}\n")

    if 'sumrate_vs_pt.csv' in present:
        rates = _pooled(_read(directory, 'sumrate_vs_pt.csv'), 'sum_rate')
        sections.append("## Sum rate (bit/s/Hz)\n")
        sections.append(_block(rates.pivot(index='Pt_dBm', columns='scheme', values='sum_rate')))

    if 'papr.csv' in present:
        means = _read(directory, 'papr.csv').groupby('scheme')['papr_db'].mean().sort_values()
        sections.append("## Mean PAPR (dB)\n")
        sections.append(_block(means.to_frame()))

    if 'convergence.csv' in present:
        sections.append("## Convergence stage counts\n")
        sections.append(_block(stage_counts(_read(directory, 'convergence.csv')).to_frame()))

    if 'layers_sweep.csv' in present:
        layers = _read(directory, 'layers_sweep.csv').groupby('L')['final_loss'].mean()
        sections.append("## Final loss by layer count\n")
        sections.append(_block(layers.to_frame()))

    if 'im_tradeoff.csv' in present:
        sections.append("## Index-selection trade-off\n")
        sections.append(_block(_read(directory, 'im_tradeoff.csv')))

    return '\n'.join(sections)
