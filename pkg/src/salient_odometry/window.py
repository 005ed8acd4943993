"""
Sliding-window state: keyframes, their hosted points and the marginalization prior.

Each keyframe owns 8 parameters in the window solver, ordered
``(v_x, v_y, v_z, w_x, w_y, w_z, a, b)``; each active point owns its inverse depth.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import PreconditionError
from .geometry import CameraIntrinsics, ImagePyramid, InverseDepthPoint, Pose, PointStatus
from .photometric import AffineBrightness
from .saliency_filter import SaliencyMap

logger = logging.getLogger(__name__)

FRAME_PARAMS = 8


@dataclass(eq=False)
class Frame:
    """A preprocessed input frame."""

    frame_id: int
    timestamp: float
    pyramid: ImagePyramid
    exposure: float = 1.0
    saliency: Optional[SaliencyMap] = None


@dataclass(eq=False)
class KeyFrame:
    frame_id: int
    timestamp: float
    pyramid: ImagePyramid
    pose: Pose
    affine: AffineBrightness
    saliency: Optional[SaliencyMap] = None
    points: List[InverseDepthPoint] = field(default_factory=list)

    @classmethod
    def from_frame(cls, frame: Frame, pose: Pose, affine: AffineBrightness) -> "KeyFrame":
        return cls(frame.frame_id, frame.timestamp, frame.pyramid, pose, affine, frame.saliency)

    def active_points(self) -> List[InverseDepthPoint]:
        return [p for p in self.points if p.status is PointStatus.ACTIVE]

    def candidates(self) -> List[InverseDepthPoint]:
        return [p for p in self.points if p.status is PointStatus.CANDIDATE]

    def prune(self) -> None:
        """Drop points that left the Candidate/Active states."""
        self.points = [
            p for p in self.points if p.status in (PointStatus.CANDIDATE, PointStatus.ACTIVE)
        ]


def point_world_position(point: InverseDepthPoint, host: KeyFrame, camera: CameraIntrinsics) -> np.ndarray:
    ray = camera.back_project(np.array(point.u), np.array(point.v))
    return host.pose.transform(ray / point.idepth)


def pose_delta(reference: Pose, current: Pose) -> np.ndarray:
    """Right-perturbation ``delta`` with ``current = reference * exp(delta)``."""
    return reference.inverse().compose(current).log()


@dataclass(eq=False)
class MarginalizationPrior:
    """
    Quadratic prior ``E(d) = g.d + d.H.d / 2`` over the parameters of ``frame_ids``.

    ``d`` is the deviation of the current frame parameters from the stored
    linearization point.
    """

    frame_ids: List[int]
    hessian: np.ndarray
    gradient: np.ndarray
    poses: Dict[int, Pose]
    affines: Dict[int, Tuple[float, float]]

    @classmethod
    def empty(cls) -> "MarginalizationPrior":
        return cls([], np.zeros((0, 0)), np.zeros(0), {}, {})

    @property
    def is_empty(self) -> bool:
        return not self.frame_ids

    def delta(self, frames: Dict[int, KeyFrame]) -> np.ndarray:
        d = np.zeros(FRAME_PARAMS * len(self.frame_ids))
        for index, frame_id in enumerate(self.frame_ids):
            frame = frames[frame_id]
            a0, b0 = self.affines[frame_id]
            block = slice(FRAME_PARAMS * index, FRAME_PARAMS * (index + 1))
            d[block] = np.concatenate(
                [pose_delta(self.poses[frame_id], frame.pose), [frame.affine.a - a0, frame.affine.b - b0]]
            )
        return d

    def energy(self, frames: Dict[int, KeyFrame]) -> float:
        if self.is_empty:
            return 0.0
        d = self.delta(frames)
        return float(self.gradient @ d + 0.5 * d @ self.hessian @ d)

    def gradient_at(self, frames: Dict[int, KeyFrame]) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0)
        return self.gradient + self.hessian @ self.delta(frames)

    def relinearized(self, frames: Dict[int, KeyFrame]) -> "MarginalizationPrior":
        """Move the linearization point to the current state (first-order gradient shift)."""
        return MarginalizationPrior(
            list(self.frame_ids),
            self.hessian.copy(),
            self.gradient_at(frames),
            {fid: frames[fid].pose for fid in self.frame_ids},
            {fid: (frames[fid].affine.a, frames[fid].affine.b) for fid in self.frame_ids},
        )

    def expanded(self, frame_ids: Sequence[int], frames: Dict[int, KeyFrame]) -> "MarginalizationPrior":
        """Re-express over ``frame_ids`` (a superset); new frames get zero blocks."""
        n = len(frame_ids)
        hessian = np.zeros((FRAME_PARAMS * n, FRAME_PARAMS * n))
        gradient = np.zeros(FRAME_PARAMS * n)
        position = {fid: i for i, fid in enumerate(frame_ids)}
        index = np.concatenate(
            [np.arange(FRAME_PARAMS) + FRAME_PARAMS * position[fid] for fid in self.frame_ids]
        ) if self.frame_ids else np.zeros(0, dtype=int)
        hessian[np.ix_(index, index)] = self.hessian
        gradient[index] = self.gradient
        poses = {fid: self.poses.get(fid, frames[fid].pose) for fid in frame_ids}
        affines = {
            fid: self.affines.get(fid, (frames[fid].affine.a, frames[fid].affine.b)) for fid in frame_ids
        }
        return MarginalizationPrior(list(frame_ids), hessian, gradient, poses, affines)


@dataclass(eq=False)
class WindowState:
    camera: CameraIntrinsics
    keyframes: List[KeyFrame] = field(default_factory=list)
    prior: MarginalizationPrior = field(default_factory=MarginalizationPrior.empty)
    # (x, y, z, intensity) of every point that left the window as marginalized
    retired_points: List[Tuple[float, float, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def latest(self) -> KeyFrame:
        if not self.keyframes:
            raise PreconditionError("window is empty")
        return self.keyframes[-1]

    @property
    def frame_ids(self) -> List[int]:
        return [kf.frame_id for kf in self.keyframes]

    def frames_by_id(self) -> Dict[int, KeyFrame]:
        return {kf.frame_id: kf for kf in self.keyframes}

    def frame(self, frame_id: int) -> KeyFrame:
        for kf in self.keyframes:
            if kf.frame_id == frame_id:
                return kf
        raise PreconditionError(f"keyframe {frame_id} is not in the window")

    def add_keyframe(self, keyframe: KeyFrame) -> None:
        if self.keyframes and keyframe.frame_id <= self.latest.frame_id:
            raise PreconditionError(f"keyframe ids must increase, got {keyframe.frame_id}")
        self.keyframes.append(keyframe)

    def active_points(self) -> Dict[int, List[InverseDepthPoint]]:
        return {kf.frame_id: kf.active_points() for kf in self.keyframes}

    def active_point_count(self) -> int:
        return sum(len(kf.active_points()) for kf in self.keyframes)

    def check_consistency(self) -> None:
        live = set(self.frame_ids)
        for kf in self.keyframes:
            for point in kf.points:
                if point.host_frame_id != kf.frame_id:
                    raise PreconditionError(f"point {point.point_id} is hosted by the wrong keyframe")
                if point.host_frame_id in point.observations:
                    raise PreconditionError(f"point {point.point_id} observes its own host")
                if not point.observations <= live:
                    raise PreconditionError(f"point {point.point_id} observes a dropped keyframe")
        if not set(self.prior.frame_ids) <= live:
            raise PreconditionError("marginalization prior references a dropped keyframe")

    def retire(self, point: InverseDepthPoint, host: KeyFrame) -> None:
        """Record a marginalized point's world position for map export."""
        if point.idepth > 0:
            x, y, z = point_world_position(point, host, self.camera)
            intensity = float(point.host_values[0]) if point.host_values is not None else 0.0
            self.retired_points.append((float(x), float(y), float(z), intensity))
