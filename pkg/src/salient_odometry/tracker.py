"""
Frame-to-keyframe direct image alignment.

A new frame is aligned against the latest keyframe by coarse-to-fine
Gauss-Newton over its pose and affine brightness, starting from a
constant-motion prediction. When that fails, 27 small rotations around the
prediction are tried before the frame is declared lost.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import PreconditionError
from .geometry import CameraIntrinsics, Pose, project_points, relative_pose, scale_pixels
from .photometric import (
    DEFAULT_GRADIENT_CONSTANT,
    DEFAULT_HUBER_THRESHOLD,
    PATTERN,
    AffineBrightness,
    ResidualBlock,
    host_pattern,
    residual_block,
)
from .window import Frame, KeyFrame, WindowState

logger = logging.getLogger(__name__)

NO_SIGNAL_GRADIENT = 1e-6


class TrackingStatus(Enum):
    OK = "ok"
    RECOVERED = "recovered"
    LOST = "lost"


@dataclass(frozen=True)
class TrackerSettings:
    huber_threshold: float = DEFAULT_HUBER_THRESHOLD
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT
    iterations: int = 10
    # mean energy per in-view residual above which a frame counts as lost
    lost_energy_threshold: float = 60.0
    min_in_view_fraction: float = 0.3
    out_of_view_energy: float = 12.0 * 9
    recovery_rotation_deg: float = 3.0


@dataclass(frozen=True, eq=False)
class TrackingResult:
    """Outcome of aligning one frame; ``pose`` is keyframe-from-frame, ``affine`` is absolute."""

    pose: Pose
    affine: AffineBrightness
    energy: float
    status: TrackingStatus
    in_view_fraction: float = 0.0

    @property
    def usable(self) -> bool:
        return self.status is not TrackingStatus.LOST


@dataclass(eq=False)
class TrackingReference:
    """Points with known inverse depth expressed in the latest keyframe."""

    keyframe: KeyFrame
    camera: CameraIntrinsics
    u: np.ndarray
    v: np.ndarray
    idepth: np.ndarray
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT
    _levels: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False
    )

    def __post_init__(self) -> None:
        if len(self.u) == 0:
            raise PreconditionError("tracking needs at least one point with known depth")

    @classmethod
    def from_window(
        cls, window: WindowState, gradient_constant: float = DEFAULT_GRADIENT_CONSTANT
    ) -> "TrackingReference":
        """Project every active point of the window into the latest keyframe."""
        latest = window.latest
        us, vs, idepths = [], [], []
        for kf in window.keyframes:
            points = kf.active_points()
            if not points:
                continue
            projected = project_points(
                relative_pose(kf.pose, latest.pose),
                window.camera,
                np.array([p.u for p in points]),
                np.array([p.v for p in points]),
                np.array([p.idepth for p in points]),
                margin=PATTERN.radius,
            )
            keep = projected.valid & (projected.idepth > 0)
            us.append(projected.u[keep])
            vs.append(projected.v[keep])
            idepths.append(projected.idepth[keep])
        if not us:
            raise PreconditionError("latest keyframe has no active points")
        return cls(
            latest, window.camera, np.concatenate(us), np.concatenate(vs), np.concatenate(idepths),
            gradient_constant,
        )

    def level_data(self, level: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(u, v, host values, weights) at pyramid ``level``."""
        if level not in self._levels:
            u = scale_pixels(self.u, level)
            v = scale_pixels(self.v, level)
            values, weights = host_pattern(self.keyframe.pyramid[level], u, v, self.gradient_constant)
            self._levels[level] = (u, v, values, weights)
        return self._levels[level]


def _evaluate(
    reference: TrackingReference,
    level: int,
    pose: Pose,
    affine: AffineBrightness,
    frame: Frame,
    settings: TrackerSettings,
    with_jacobians: bool,
) -> Tuple[ResidualBlock, float]:
    u, v, values, weights = reference.level_data(level)
    block = residual_block(
        pose.inverse(),
        reference.camera.scaled(level),
        u,
        v,
        reference.idepth,
        values,
        weights,
        reference.keyframe.affine,
        affine,
        frame.pyramid[level],
        settings.huber_threshold,
        with_jacobians=with_jacobians,
    )
    energy = block.energy + settings.out_of_view_energy * float(np.count_nonzero(~block.valid))
    return block, energy


def _align_level(
    reference: TrackingReference,
    level: int,
    pose: Pose,
    affine: AffineBrightness,
    frame: Frame,
    settings: TrackerSettings,
) -> Tuple[Pose, AffineBrightness]:
    block, energy = _evaluate(reference, level, pose, affine, frame, settings, True)
    damping = 1e-3
    for _ in range(settings.iterations):
        J = np.concatenate([block.d_target, block.d_affine[..., 1:2], block.d_affine[..., 3:4]], axis=-1)
        H = np.einsum("npi,np,npj->ij", J, block.weights, J)
        g = np.einsum("npi,np,np->i", J, block.weights, block.residuals)
        improved = False
        while damping < 1e6:
            try:
                delta = np.linalg.solve(H + damping * np.diag(np.diag(H) + 1e-6), -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                damping *= 10.0
                continue
            new_pose = pose.perturbed(delta[:6])
            new_affine = affine.shifted(delta[6], delta[7])
            new_block, new_energy = _evaluate(reference, level, new_pose, new_affine, frame, settings, True)
            if new_energy < energy:
                improvement = energy - new_energy
                pose, affine, block, energy = new_pose, new_affine, new_block, new_energy
                damping = max(damping * 0.5, 1e-7)
                improved = improvement > 1e-6 * max(energy, 1e-12) and np.linalg.norm(delta) > 1e-8
                break
            damping *= 10.0
        if not improved:
            break
    return pose, affine


def _has_signal(frame: Frame) -> bool:
    level = frame.pyramid[0]
    return float(np.max(np.abs(level.grad_x)) + np.max(np.abs(level.grad_y))) > NO_SIGNAL_GRADIENT


def track_frame(
    frame: Frame,
    reference: TrackingReference,
    motion_prior: Pose,
    affine_prior: AffineBrightness,
    settings: TrackerSettings = TrackerSettings(),
) -> TrackingResult:
    """
    Align ``frame`` to the reference keyframe, coarse to fine.

    Args:
        frame: new frame
        reference: keyframe points with known inverse depth
        motion_prior: keyframe-from-frame initial guess
        affine_prior: initial absolute brightness parameters of the frame
        settings: tracker settings

    Returns:
        TrackingResult; when lost, ``pose`` is ``motion_prior``
    """
    affine = AffineBrightness(affine_prior.a, affine_prior.b, frame.exposure)
    if not _has_signal(frame):
        logger.debug(f"Frame {frame.frame_id} has no photometric signal")
        return TrackingResult(motion_prior, affine, float("inf"), TrackingStatus.LOST)

    pose = motion_prior
    levels = min(frame.pyramid.num_levels, reference.keyframe.pyramid.num_levels)
    for level in reversed(range(levels)):
        pose, affine = _align_level(reference, level, pose, affine, frame, settings)

    block, _ = _evaluate(reference, 0, pose, affine, frame, settings, False)
    in_view = float(np.mean(block.valid))
    n_valid = int(np.count_nonzero(block.valid))
    mean_energy = block.energy / (n_valid * PATTERN.size) if n_valid else float("inf")
    ok = np.isfinite(mean_energy) and mean_energy <= settings.lost_energy_threshold
    ok = ok and in_view >= settings.min_in_view_fraction
    if not ok:
        logger.debug(
            f"Frame {frame.frame_id} lost: mean energy {mean_energy:.2f}, in view {in_view:.2f}"
        )
        return TrackingResult(motion_prior, affine, mean_energy, TrackingStatus.LOST, in_view)
    return TrackingResult(pose, affine, mean_energy, TrackingStatus.OK, in_view)


def recovery_rotations(delta_deg: float) -> Tuple[Pose, ...]:
    """The 27 rotations {-d, 0, +d} about each camera axis (identity included)."""
    steps = (-delta_deg, 0.0, delta_deg)
    return tuple(
        Pose(Rotation.from_euler("xyz", angles, degrees=True).as_matrix(), np.zeros(3))
        for angles in itertools.product(steps, steps, steps)
    )


def recover_tracking(
    frame: Frame,
    reference: TrackingReference,
    motion_prior: Pose,
    affine_prior: AffineBrightness,
    settings: TrackerSettings = TrackerSettings(),
) -> TrackingResult:
    """Retry alignment from 27 rotated initializations and keep the best converged one."""
    best: Optional[TrackingResult] = None
    for rotation in recovery_rotations(settings.recovery_rotation_deg):
        result = track_frame(frame, reference, motion_prior.compose(rotation), affine_prior, settings)
        if result.usable and (best is None or result.energy < best.energy):
            best = result
    if best is None:
        logger.warning(f"Frame {frame.frame_id}: recovery failed from all 27 initializations")
        affine = AffineBrightness(affine_prior.a, affine_prior.b, frame.exposure)
        return TrackingResult(motion_prior, affine, float("inf"), TrackingStatus.LOST)
    logger.info(f"Frame {frame.frame_id}: tracking recovered (mean energy {best.energy:.2f})")
    return TrackingResult(best.pose, best.affine, best.energy, TrackingStatus.RECOVERED, best.in_view_fraction)
