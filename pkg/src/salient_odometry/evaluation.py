"""
Trajectory metrics.

Monocular trajectories are only defined up to a similarity transform, so
both metrics align the estimate with rotation, translation and scale before
measuring translational error.

Trajectory files use one pose per line: ``timestamp tx ty tz qx qy qz qw``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InputError, SalientOdometryError
from .geometry import Pose

logger = logging.getLogger(__name__)

MAX_TIME_DIFFERENCE = 0.01
MIN_ASSOCIATIONS = 3
TRAJECTORY_COLUMNS = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


class MetricUndefinedError(SalientOdometryError):
    """Raised when a metric has too little data to be defined."""


@dataclass(eq=False)
class Trajectory:
    """Stamped world-from-camera poses with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: List[Pose]

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise InputError(f"{len(self.timestamps)} timestamps for {len(self.poses)} poses")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise InputError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, Pose]]) -> "Trajectory":
        pairs = list(pairs)
        return cls(np.array([p[0] for p in pairs]), [p[1] for p in pairs])

    @classmethod
    def empty(cls) -> "Trajectory":
        return cls(np.zeros(0), [])

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    @property
    def length(self) -> float:
        """Travelled distance."""
        positions = self.positions
        if len(positions) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        return Trajectory(self.timestamps[list(indices)], [self.poses[i] for i in indices])

    def transformed(self, scale: float, transform: Pose) -> "Trajectory":
        """Apply the similarity ``x -> scale * R x + t`` to every pose."""
        poses = [
            Pose(transform.rotation @ p.rotation, scale * transform.rotation @ p.translation + transform.translation)
            for p in self.poses
        ]
        return Trajectory(self.timestamps.copy(), poses)


@dataclass(frozen=True)
class Similarity:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


# ---------------------------------------------------------------------------
# Association and alignment
# ---------------------------------------------------------------------------

def associate(
    estimate: Trajectory, ground_truth: Trajectory, max_dt: float = MAX_TIME_DIFFERENCE
) -> List[Tuple[int, int]]:
    """
    Match each estimate pose to the nearest ground-truth timestamp within ``max_dt``.

    Every pose is used at most once; closer pairs win. Returns (estimate index,
    ground-truth index) pairs ordered by estimate index.
    """
    if not len(estimate) or not len(ground_truth):
        return []
    reference = ground_truth.timestamps
    candidates = []
    for i, stamp in enumerate(estimate.timestamps):
        right = int(np.searchsorted(reference, stamp))
        for j in (right - 1, right):
            if 0 <= j < len(reference):
                difference = abs(reference[j] - stamp)
                if difference <= max_dt:
                    candidates.append((difference, i, j))
    candidates.sort()
    used_estimate, used_truth = set(), set()
    matches = []
    for _, i, j in candidates:
        if i in used_estimate or j in used_truth:
            continue
        used_estimate.add(i)
        used_truth.add(j)
        matches.append((i, j))
    return sorted(matches)


def umeyama_alignment(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> Similarity:
    """
    Closed-form least-squares similarity mapping ``source`` onto ``target``.

    Minimizes sum ||s R source_i + t - target_i||^2 over rotation, translation
    and (optionally) scale.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise InputError(f"alignment needs matching (N, 3) arrays, got {source.shape} and {target.shape}")
    if len(source) < MIN_ASSOCIATIONS:
        raise MetricUndefinedError(f"alignment needs >= {MIN_ASSOCIATIONS} point pairs, got {len(source)}")

    mu_source = source.mean(axis=0)
    mu_target = target.mean(axis=0)
    source_centered = source - mu_source
    target_centered = target - mu_target

    correlation = target_centered.T @ source_centered / len(source)
    sigma2 = float((source_centered ** 2).sum() / len(source))
    U, D, Vt = np.linalg.svd(correlation)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    rotation = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / sigma2) if with_scale and sigma2 > 0 else 1.0
    translation = mu_target - scale * rotation @ mu_source
    return Similarity(scale, rotation, translation)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def ate_errors(
    estimate: Trajectory, ground_truth: Trajectory, max_dt: float = MAX_TIME_DIFFERENCE
) -> np.ndarray:
    """Per-pose translational errors after similarity alignment."""
    matches = associate(estimate, ground_truth, max_dt)
    if len(matches) < MIN_ASSOCIATIONS:
        raise MetricUndefinedError(
            f"absolute trajectory error needs >= {MIN_ASSOCIATIONS} associated poses, got {len(matches)}"
        )
    source = estimate.positions[[i for i, _ in matches]]
    target = ground_truth.positions[[j for _, j in matches]]
    alignment = umeyama_alignment(source, target)
    return np.linalg.norm(alignment.apply(source) - target, axis=1)


def rmse_ate(estimate: Trajectory, ground_truth: Trajectory, max_dt: float = MAX_TIME_DIFFERENCE) -> float:
    """Root-mean-square absolute trajectory error (meters) after similarity alignment."""
    errors = ate_errors(estimate, ground_truth, max_dt)
    return float(np.sqrt(np.mean(errors ** 2)))


def _segment_alignment(estimate: Trajectory, segment: Trajectory, name: str, max_dt: float) -> Similarity:
    matches = associate(estimate, segment, max_dt)
    if len(matches) < MIN_ASSOCIATIONS:
        raise MetricUndefinedError(
            f"{name} segment needs >= {MIN_ASSOCIATIONS} associated poses, got {len(matches)}"
        )
    return umeyama_alignment(
        estimate.positions[[i for i, _ in matches]], segment.positions[[j for _, j in matches]]
    )


def align_error(
    estimate: Trajectory,
    start_segment: Trajectory,
    end_segment: Trajectory,
    max_dt: float = MAX_TIME_DIFFERENCE,
) -> float:
    """
    Loop drift: the estimate is aligned separately to the ground-truth start
    and end segments, and the RMSE between the two aligned copies of the full
    estimate is returned.
    """
    start = _segment_alignment(estimate, start_segment, "start", max_dt)
    end = _segment_alignment(estimate, end_segment, "end", max_dt)
    positions = estimate.positions
    difference = start.apply(positions) - end.apply(positions)
    return float(np.sqrt(np.mean(np.sum(difference ** 2, axis=1))))


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    rows = [
        [stamp, *pose.translation, *pose.quaternion()]
        for stamp, pose in zip(trajectory.timestamps, trajectory.poses)
    ]
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def write_trajectory(trajectory: Trajectory, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory_frame(trajectory).to_csv(path, sep=" ", header=False, index=False, float_format="%.9f")
    logger.debug(f"Wrote {len(trajectory)} poses to {path}")


def read_trajectory(path: Union[str, Path]) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise InputError(f"trajectory file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=TRAJECTORY_COLUMNS)
    except pd.errors.EmptyDataError:
        return Trajectory.empty()
    if frame.isnull().values.any():
        raise InputError(f"{path}: every line needs 8 values (timestamp tx ty tz qx qy qz qw)")
    frame = frame.sort_values("timestamp", kind="stable")
    poses = [
        Pose.from_quaternion(row[["qx", "qy", "qz", "qw"]].to_numpy(), row[["tx", "ty", "tz"]].to_numpy())
        for _, row in frame.iterrows()
    ]
    return Trajectory(frame["timestamp"].to_numpy(), poses)
