"""
Success-rate benchmark.

A run fails on an optimization failure or a tracking loss; it succeeds when
it reaches the last frame with neither. A run whose frames cannot be read is
recorded with status "error" and the remaining runs go on. Each run gets its
own seed (``base_seed + run_index``), and every direction is run ``runs`` times.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from scipy.stats import fisher_exact

from .config import RunConfig
from .database import BenchmarkDatabase
from .datasets import count_frames, load_dataset
from .errors import ConfigurationError, InputError
from .evaluation import MetricUndefinedError, rmse_ate
from .odometry import run_odometry
from .saliency_filter import ClassWeights

logger = logging.getLogger(__name__)

DIRECTIONS = ("forward", "backward")
STATUS_ERROR = "error"


@dataclass(frozen=True)
class RunSpec:
    dataset_path: str
    dataset_format: str
    config: RunConfig
    run_index: int
    seed: int
    direction: str
    saliency_dir: Optional[str] = None
    segmentation_dir: Optional[str] = None
    class_weights: Optional[ClassWeights] = None


@dataclass
class RunRecord:
    run_index: int
    seed: int
    direction: str
    selection_mode: str
    success: bool
    status: str
    failure_cause: Optional[str]
    frames_processed: int
    frames_total: int
    keyframes: int
    elapsed_seconds: float
    rmse_ate: Optional[float] = None


@dataclass
class BenchmarkResult:
    records: List[RunRecord] = field(default_factory=list)
    success_rates: Dict[str, float] = field(default_factory=dict)
    vacuous: bool = False

    def runs_frame(self) -> pd.DataFrame:
        columns = [f.name for f in RunRecord.__dataclass_fields__.values()]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for direction, rate in self.success_rates.items():
            runs = [r for r in self.records if r.direction == direction]
            rows.append(
                {
                    "direction": direction,
                    "runs": len(runs),
                    "successes": sum(r.success for r in runs),
                    "success_rate": rate,
                }
            )
        return pd.DataFrame(rows, columns=["direction", "runs", "successes", "success_rate"])


def run_seeds(base_seed: int, runs: int) -> List[int]:
    return [base_seed + i for i in range(runs)]


def execute_run(spec: RunSpec) -> RunRecord:
    """One full pipeline run; module-level so worker processes can pickle it."""
    config = replace(spec.config, rng_seed=spec.seed)
    dataset = None
    try:
        dataset = load_dataset(
            spec.dataset_path, spec.dataset_format, config, spec.saliency_dir, spec.segmentation_dir
        )
        if spec.direction == "backward":
            dataset = dataset.reversed()
        result = run_odometry(dataset, config, spec.class_weights)
    except InputError as e:
        logger.error(f"Run {spec.run_index} ({spec.direction}) aborted: {e}")
        return RunRecord(
            run_index=spec.run_index,
            seed=spec.seed,
            direction=spec.direction,
            selection_mode=config.selection_mode,
            success=False,
            status=STATUS_ERROR,
            failure_cause=f"input error: {e}",
            frames_processed=0,
            frames_total=len(dataset) if dataset is not None else 0,
            keyframes=0,
            elapsed_seconds=0.0,
        )
    report = result.report
    error = None
    if report.success and dataset.ground_truth is not None:
        try:
            error = rmse_ate(result.trajectory, dataset.ground_truth)
        except MetricUndefinedError as e:
            logger.debug(f"Run {spec.run_index}: {e}")
    return RunRecord(
        run_index=spec.run_index,
        seed=spec.seed,
        direction=spec.direction,
        selection_mode=config.selection_mode,
        success=report.success,
        status=report.status,
        failure_cause=report.failure_cause,
        frames_processed=report.frames_processed,
        frames_total=report.frames_total,
        keyframes=report.keyframes,
        elapsed_seconds=report.elapsed_seconds,
        rmse_ate=error,
    )


def success_rate_harness(
    dataset_path: Union[str, Path],
    dataset_format: str,
    config: RunConfig,
    runs: int,
    directions: Sequence[str] = DIRECTIONS,
    workers: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
    database: Optional[BenchmarkDatabase] = None,
    saliency_dir: Optional[str] = None,
    segmentation_dir: Optional[str] = None,
    class_weights: Optional[ClassWeights] = None,
) -> BenchmarkResult:
    """
    Run the pipeline ``runs`` times per direction and report success fractions.

    Args:
        dataset_path: dataset directory
        dataset_format: one of the ``load_dataset`` formats
        config: base configuration; ``rng_seed`` is the first run's seed
        runs: runs per direction (>= 1)
        directions: any of "forward", "backward"
        workers: worker processes (1 runs in-process)
        out_dir: when given, runs.csv and summary.csv are written there
        database: when given, every run is stored in it

    Returns:
        BenchmarkResult with per-run records ordered by (direction, run index)
    """
    if runs < 1:
        raise ConfigurationError(f"runs must be >= 1, got {runs}")
    unknown = set(directions) - set(DIRECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown directions {sorted(unknown)}")

    result = BenchmarkResult()
    if count_frames(dataset_path, dataset_format, config) == 0:
        logger.warning(f"Dataset {dataset_path} has no frames: every run succeeds vacuously")
        result.success_rates = {direction: 1.0 for direction in directions}
        result.vacuous = True
        _write_tables(result, out_dir)
        return result

    specs = [
        RunSpec(
            str(dataset_path), dataset_format, config, index, seed, direction,
            saliency_dir, segmentation_dir, class_weights,
        )
        for direction in directions
        for index, seed in enumerate(run_seeds(config.rng_seed, runs))
    ]
    logger.info(f"Benchmark: {len(specs)} runs on {dataset_path} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(execute_run, specs))
    else:
        records = [execute_run(spec) for spec in specs]
    result.records = sorted(records, key=lambda r: (directions.index(r.direction), r.run_index))

    for direction in directions:
        outcomes = [r.success for r in result.records if r.direction == direction]
        result.success_rates[direction] = sum(outcomes) / len(outcomes)
        logger.info(f"{direction}: {sum(outcomes)}/{len(outcomes)} runs succeeded")

    if database is not None:
        benchmark_id = database.start_benchmark(
            str(dataset_path), config.selection_mode, config.num_points, runs, config.serialize()
        )
        for record in result.records:
            database.save_run(benchmark_id, asdict(record))
    _write_tables(result, out_dir)
    return result


def _write_tables(result: BenchmarkResult, out_dir: Optional[Union[str, Path]]) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.runs_frame().to_csv(out / "runs.csv", index=False)
    result.summary_frame().to_csv(out / "summary.csv", index=False)
    logger.info(f"Wrote runs.csv and summary.csv to {out}")


def compare_success(better: Sequence[bool], worse: Sequence[bool]) -> Tuple[float, float, float]:
    """
    One-sided Fisher exact test that ``better`` succeeds more often than ``worse``.

    Returns (rate of better, rate of worse, p-value).
    """
    a, b = sum(better), sum(worse)
    table = [[a, len(better) - a], [b, len(worse) - b]]
    _, p_value = fisher_exact(table, alternative="greater")
    return a / len(better), b / len(worse), float(p_value)
