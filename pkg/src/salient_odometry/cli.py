#!/usr/bin/env python3
"""
Salient Odometry command line

Runs saliency-driven direct sparse odometry on a dataset, renders synthetic
benchmark scenes, evaluates trajectories and runs the success-rate benchmark.

Usage Examples:
    # Render the reference loop scene
    salient-odometry gen --scene loop --out-dir scenes/loop

    # Run odometry on it with saliency-driven point selection
    salient-odometry run --dataset scenes/loop --format synthetic --out-dir output/loop

    # Same run with uniform selection and a TUM preset
    salient-odometry run --dataset scenes/loop --format synthetic --preset tum --mode uniform

    # Absolute trajectory error against ground truth
    salient-odometry eval --estimate output/loop/trajectory.txt --groundtruth scenes/loop/groundtruth.txt

    # 100 seeded runs per direction at 40 points, saliency against uniform
    salient-odometry bench --dataset scenes/cluttered --format synthetic --num-points 40 --runs 100 --compare
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import PRESETS, EnvironmentSettings, RunConfig
from .database import BenchmarkDatabase
from .datasets import DATASET_FORMATS, load_dataset
from .errors import SalientOdometryError
from .evaluation import align_error, read_trajectory, rmse_ate
from .harness import DIRECTIONS, compare_success, success_rate_harness
from .odometry import run_odometry, write_outputs
from .saliency_filter import ClassWeights, load_class_weights
from .synthetic import REFERENCE_SCENES, generate_scene, scene_from_name, write_scene

logger = logging.getLogger(__name__)


def setup_logging(debug: bool = False) -> None:
    """Set up logging configuration."""
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler('logs/salient_odometry.log') if Path('logs').exists() else logging.NullHandler()
        ]
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace, env: EnvironmentSettings) -> RunConfig:
    """Preset, then config file (flag or environment), then individual flags."""
    config = RunConfig.preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    config_path = getattr(args, "config", None) or env.config_path
    if config_path:
        config = RunConfig.from_file(config_path, base=config)
    overrides = {}
    if getattr(args, "mode", None):
        overrides["selection_mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "num_points", None) is not None:
        overrides["num_points"] = args.num_points
    return replace(config, **overrides) if overrides else config


def resolve_class_weights(args: argparse.Namespace, env: EnvironmentSettings, config: RunConfig) -> ClassWeights:
    path = getattr(args, "class_weights", None) or env.class_weights
    if path:
        return load_class_weights(path, config.default_class_weight)
    return ClassWeights.default_indoor(default=config.default_class_weight)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace, env: EnvironmentSettings) -> int:
    config = resolve_config(args, env)
    weights = resolve_class_weights(args, env, config)
    dataset = load_dataset(args.dataset, args.format, config, args.saliency_dir, args.segmentation_dir)
    if args.direction == "backward":
        dataset = dataset.reversed()
    result = run_odometry(dataset, config, weights)
    out = write_outputs(result, args.out_dir or Path(env.output_dir) / dataset.name)
    logger.info(f"Outputs written to {out}")
    if result.report.success and dataset.ground_truth is not None:
        try:
            logger.info(f"RMSE_ate: {rmse_ate(result.trajectory, dataset.ground_truth):.4f} m")
        except SalientOdometryError as e:
            logger.warning(f"RMSE_ate undefined: {e}")
    return 0 if result.report.success else 1


def cmd_gen(args: argparse.Namespace, env: EnvironmentSettings) -> int:
    spec = scene_from_name(args.scene, args.frames, args.seed)
    scene = generate_scene(spec)
    write_scene(scene, args.out_dir or Path(env.output_dir) / "scenes" / args.scene)
    return 0


def cmd_eval(args: argparse.Namespace, env: EnvironmentSettings) -> int:
    estimate = read_trajectory(args.estimate)
    results = {}
    if args.groundtruth:
        results["rmse_ate"] = rmse_ate(estimate, read_trajectory(args.groundtruth))
    if args.start_segment and args.end_segment:
        results["e_align"] = align_error(
            estimate, read_trajectory(args.start_segment), read_trajectory(args.end_segment)
        )
    if not results:
        logger.error("Nothing to evaluate: pass --groundtruth and/or --start-segment with --end-segment")
        return 1
    print(json.dumps(results, indent=2))
    return 0


def cmd_bench(args: argparse.Namespace, env: EnvironmentSettings) -> int:
    config = resolve_config(args, env)
    weights = resolve_class_weights(args, env, config)
    directions = DIRECTIONS if args.direction == "both" else (args.direction,)
    database = BenchmarkDatabase(args.db_path or env.bench_db)
    out_dir = Path(args.out_dir or Path(env.output_dir) / "bench")
    modes = ("saliency", "uniform") if args.compare else (config.selection_mode,)

    outcomes = {}
    for mode in modes:
        result = success_rate_harness(
            args.dataset,
            args.format,
            replace(config, selection_mode=mode),
            args.runs,
            directions,
            workers=args.workers,
            out_dir=out_dir / mode if args.compare else out_dir,
            database=database,
            saliency_dir=args.saliency_dir,
            segmentation_dir=args.segmentation_dir,
            class_weights=weights,
        )
        for direction, rate in result.success_rates.items():
            print(f"{mode:>9} {direction:>8}: {rate:.1%}")
        outcomes[mode] = [r.success for r in result.records]

    if args.compare and outcomes["saliency"] and outcomes["uniform"]:
        rate_s, rate_u, p_value = compare_success(outcomes["saliency"], outcomes["uniform"])
        print(f"saliency {rate_s:.1%} vs uniform {rate_u:.1%}: one-sided p = {p_value:.4g}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_dataset_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--dataset', required=True, help='Dataset directory')
    parser.add_argument('--format', choices=DATASET_FORMATS, default='synthetic', help='Dataset layout')
    parser.add_argument('--saliency-dir', help='Saliency sidecar directory (default: <dataset>/saliency)')
    parser.add_argument('--segmentation-dir', help='Segmentation sidecar directory (default: <dataset>/semantic)')
    parser.add_argument('--class-weights', help='Class weights file (default: wall/floor/ceiling at 0.1)')


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='Configuration file (key = value lines)')
    parser.add_argument('--preset', choices=PRESETS, help='Start from a shipped preset')
    parser.add_argument('--mode', choices=('saliency', 'uniform'), help='Point selection mode')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--num-points', type=int, help='Active point budget')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='salient-odometry',
        description='Saliency-driven direct sparse odometry',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run odometry on a dataset',
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_dataset_args(run)
    _add_config_args(run)
    run.add_argument('--direction', choices=DIRECTIONS, default='forward', help='Frame order')
    run.add_argument('--out-dir', help='Output directory (default: $SALIENT_OUTPUT_DIR/<dataset>)')
    run.add_argument('--debug', action='store_true', help='Enable debug logging')
    run.set_defaults(handler=cmd_run)

    gen = commands.add_parser('gen', help='Render a synthetic scene',
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gen.add_argument('--scene', choices=sorted(REFERENCE_SCENES), default='loop', help='Reference scene')
    gen.add_argument('--frames', type=int, help='Number of frames (scene default when omitted)')
    gen.add_argument('--seed', type=int, help='Texture seed')
    gen.add_argument('--out-dir', help='Output directory')
    gen.add_argument('--debug', action='store_true', help='Enable debug logging')
    gen.set_defaults(handler=cmd_gen)

    evaluate = commands.add_parser('eval', help='Evaluate a trajectory',
                                   formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    evaluate.add_argument('--estimate', required=True, help='Estimated trajectory file')
    evaluate.add_argument('--groundtruth', help='Ground-truth trajectory for RMSE_ate')
    evaluate.add_argument('--start-segment', help='Ground-truth start segment for e_align')
    evaluate.add_argument('--end-segment', help='Ground-truth end segment for e_align')
    evaluate.add_argument('--debug', action='store_true', help='Enable debug logging')
    evaluate.set_defaults(handler=cmd_eval)

    bench = commands.add_parser('bench', help='Success-rate benchmark',
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_dataset_args(bench)
    _add_config_args(bench)
    bench.add_argument('--runs', type=int, default=100, help='Runs per direction')
    bench.add_argument('--direction', choices=(*DIRECTIONS, 'both'), default='both', help='Directions to run')
    bench.add_argument('--workers', type=int, default=1, help='Worker processes')
    bench.add_argument('--db-path', help='Benchmark database (default: $SALIENT_BENCH_DB)')
    bench.add_argument('--out-dir', help='Directory for runs.csv and summary.csv')
    bench.add_argument('--compare', action='store_true', help='Run saliency and uniform selection and compare')
    bench.add_argument('--debug', action='store_true', help='Enable debug logging')
    bench.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[list] = None) -> None:
    """Main function."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)
    env = EnvironmentSettings.from_env()

    try:
        code = args.handler(args, env)
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        sys.exit(130)
    except SalientOdometryError as e:
        logger.error(f"{args.command} failed: {e}")
        sys.exit(1)
    except OSError as e:
        logger.error(f"I/O error: {e}")
        sys.exit(1)
    sys.exit(code)


if __name__ == '__main__':
    main()
