#!/usr/bin/env python3
import os
import sys
import time
import logging
import argparse

import numpy as np
import pandas as pd

from channel import draw_paths, load_channel, realize_channel, save_channel
from harness import EXPERIMENTS, SCALES, ExperimentSpec, run, summarize
from ofdm_im import code_from_config, encode_frame, random_bits
from sim_device import build_propagation, load_phases, save_phases
from system_config import SystemConfig, desk_config, load_config
from upgd import (StepSchedule, TrainRun, context_from_channel, gen_dataset, loss,
                  refresh_power, solve_phases, solver_curves, train_schedule)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    datefmt='%H:%M:%S'
)

# Configuration
DEFAULT_OUT = 'results'
DEFAULT_WORKERS = 4

def resolve_config(args):
    """Config file if given, otherwise the preset named by --scale"""
    if args.config:
        return load_config(args.config)
    return desk_config() if args.scale == 'desk' else SystemConfig()

def cmd_run(args):
    spec = ExperimentSpec(
        experiment=args.experiment,
        scale=args.scale,
        trials=args.trials,
        seeds=tuple(args.seeds),
        pt_min=args.pt_min,
        pt_max=args.pt_max,
        pt_step=args.pt_step,
        out=args.out,
        config=load_config(args.config) if args.config else None,
        workers=args.workers,
        epochs=args.epochs,
        contexts=args.contexts,
        symbols=args.symbols,
        schedule_path=args.schedule,
        tradeoff_ber=args.tradeoff_ber,
    )
    manifest = run(spec)
    failed = [name for name, passed in manifest['checks'].items() if passed is False]
    if failed:
        logging.warning(f"Failed checks: {', '.join(failed)}")

def cmd_train(args):
    cfg = resolve_config(args)
    dataset = gen_dataset(cfg, args.contexts, args.seed, progress=True)
    hyper = TrainRun(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                     seed=args.seed, T=cfg.T, workers=args.workers)
    schedule, hyper = train_schedule(dataset, hyper)
    os.makedirs(args.out, exist_ok=True)
    schedule.save(os.path.join(args.out, 'schedule.txt'))
    history_path = os.path.join(args.out, 'training_history.csv')
    hyper.history().to_csv(history_path, index=False)
    logging.info(f"Training history saved to: {history_path}")

def _single_context(cfg, args):
    """Channel and activation for one seed, optionally replacing the channel from a file"""
    prop = build_propagation(cfg)
    rng = np.random.default_rng(args.seed)
    channel = realize_channel(cfg, draw_paths(cfg, rng), seed=args.seed)
    if args.load_channel:
        channel = load_channel(args.load_channel, cfg)
        logging.info(f"Loaded channel from {args.load_channel}")
    if args.dump_channel:
        save_channel(channel, args.dump_channel)
    code = code_from_config(cfg)
    frame = encode_frame(code, cfg, random_bits(code, cfg, rng))
    return context_from_channel(cfg, channel.H, frame.Z, prop, seed=args.seed)

def cmd_optimize(args):
    cfg = resolve_config(args)
    ctx = _single_context(cfg, args)
    theta0 = load_phases(args.load_phases, cfg.L, cfg.M) if args.load_phases else None
    schedule = StepSchedule.load(args.schedule) if args.schedule else None

    start_loss, _ = loss(ctx, ctx.zero_phases() if theta0 is None else theta0)
    theta = solve_phases(ctx, theta0, schedule=schedule, iterations=args.iterations or cfg.T)
    final_loss, (k, l, n) = loss(ctx, theta)
    logging.info(f"Worst-link SINR {-start_loss:.4e} -> {-final_loss:.4e} "
                 f"(user {k}, subblock {l}, tone {n})")
    refreshed_loss, _ = loss(refresh_power(ctx, theta), theta)
    logging.info(f"Worst-link SINR after water-filling: {-refreshed_loss:.4e}")
    if args.dump_phases:
        save_phases(theta, args.dump_phases)

def cmd_compare_solvers(args):
    cfg = resolve_config(args)
    ctx = _single_context(cfg, args)
    schedule = StepSchedule.load(args.schedule) if args.schedule else StepSchedule.constant(cfg.T)
    curves = solver_curves(ctx, schedule, iterations=args.iterations)
    stages = np.arange(1, args.iterations + 1)
    upgd = np.full(args.iterations, np.nan)
    upgd[:min(schedule.T, args.iterations)] = curves['upgd'][:args.iterations]
    df = pd.DataFrame({'stage': stages, 'upgd': upgd, 'fixed': curves['fixed'],
                       'backtracking': curves['backtracking']})
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, 'solver_curves.csv')
    df.to_csv(path, index=False)
    logging.info(f"Solver curves saved to: {path}")

def cmd_summarize(args):
    report = summarize(args.directory)
    if args.output:
        with open(args.output, 'w', encoding='utf-8') as handle:
            handle.write(report)
        logging.info(f"Report saved to: {args.output}")
    else:
        print(report)

def build_parser():
    parser = argparse.ArgumentParser(prog='simstack',
                                     description='SIM-aided multiuser OFDM-IM simulator and phase optimizer')
    parser.add_argument('--verbose', action='store_true', help='Log at DEBUG level')
    subparsers = parser.add_subparsers(dest='command', required=True)

    def common(sub):
        sub.add_argument('--config', help='Path to a key = value configuration file')
        sub.add_argument('--scale', choices=SCALES, default='desk', help='Preset used when no config is given (default: desk)')
        sub.add_argument('--out', default=DEFAULT_OUT, help=f'Output directory (default: {DEFAULT_OUT})')
        sub.add_argument('--workers', type=int, default=DEFAULT_WORKERS, help=f'Number of worker threads (default: {DEFAULT_WORKERS})')

    def single(sub):
        sub.add_argument('--seed', type=int, default=0, help='Seed of the channel and bitstream (default: 0)')
        sub.add_argument('--schedule', help='Trained step-size schedule file')
        sub.add_argument('--dump-channel', help='Write the channel tensor to this file')
        sub.add_argument('--load-channel', help='Read the channel tensor from this file')

    run_parser = subparsers.add_parser('run', help='Run one experiment')
    run_parser.add_argument('experiment', choices=EXPERIMENTS)
    common(run_parser)
    run_parser.add_argument('--trials', type=int, default=200, help='Monte Carlo trial cap per point (default: 200)')
    run_parser.add_argument('--seeds', type=int, nargs='+', default=[0], help='Seeds (default: 0)')
    run_parser.add_argument('--pt-min', type=float, default=-10.0, help='Lowest Pt in dBm (default: -10)')
    run_parser.add_argument('--pt-max', type=float, default=30.0, help='Highest Pt in dBm (default: 30)')
    run_parser.add_argument('--pt-step', type=float, default=5.0, help='Pt step in dB (default: 5)')
    run_parser.add_argument('--epochs', type=int, default=20, help='Training epochs for convergence (default: 20)')
    run_parser.add_argument('--contexts', type=int, default=200, help='Training contexts for convergence (default: 200)')
    run_parser.add_argument('--symbols', type=int, default=1000, help='OFDM symbols per seed for papr (default: 1000)')
    run_parser.add_argument('--schedule', help='Trained schedule used by the SIM scheme')
    run_parser.add_argument('--tradeoff-ber', action='store_true', help='Also sweep BER for every (N, V) pattern')
    run_parser.set_defaults(handler=cmd_run)

    train_parser = subparsers.add_parser('train', help='Learn the unrolled step sizes')
    common(train_parser)
    train_parser.add_argument('--seed', type=int, default=0, help='Dataset and shuffling seed (default: 0)')
    train_parser.add_argument('--contexts', type=int, default=200, help='Number of contexts (default: 200)')
    train_parser.add_argument('--epochs', type=int, default=120, help='Training epochs (default: 120)')
    train_parser.add_argument('--batch-size', type=int, default=64, help='Mini-batch size (default: 64)')
    train_parser.add_argument('--learning-rate', type=float, default=1e-3, help='Adam learning rate (default: 1e-3)')
    train_parser.set_defaults(handler=cmd_train)

    optimize_parser = subparsers.add_parser('optimize', help='Optimize the phases of one channel')
    common(optimize_parser)
    single(optimize_parser)
    optimize_parser.add_argument('--iterations', type=int, help='PGD iterations when no schedule is given (default: T)')
    optimize_parser.add_argument('--dump-phases', help='Write the optimized phases to this file')
    optimize_parser.add_argument('--load-phases', help='Start from the phases in this file')
    optimize_parser.set_defaults(handler=cmd_optimize)

    compare_parser = subparsers.add_parser('compare-solvers', help='Per-stage losses of every solver')
    common(compare_parser)
    single(compare_parser)
    compare_parser.add_argument('--iterations', type=int, default=50, help='PGD iterations (default: 50)')
    compare_parser.set_defaults(handler=cmd_compare_solvers)

    summarize_parser = subparsers.add_parser('summarize', help='Markdown report of a result directory')
    summarize_parser.add_argument('directory')
    summarize_parser.add_argument('--output', help='Write the report here instead of stdout')
    summarize_parser.set_defaults(handler=cmd_summarize)
    return parser

def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    start_time = time.time()
    try:
        args.handler(args)
    except (ValueError, OSError) as e:
        logging.error(f"Error running {args.command}: {e}")
        return 1
    logging.info(f"Done! Total time: {time.time() - start_time:.2f} seconds")
    return 0

if __name__ == "__main__":
    sys.exit(main())
