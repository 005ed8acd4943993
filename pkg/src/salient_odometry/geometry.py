"""
Camera model, rigid poses, image pyramids and point projection.

Everything here is shared by the tracker, the window solver and the
evaluation code. Poses are world-from-camera transforms; solvers perturb them
on the right, ``T <- T * exp(delta)`` with ``delta = (v, w)``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, InputError, PointStatusError, PreconditionError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9
SMALL_ANGLE = 1e-8

ArrayLike = Union[float, Sequence[float], np.ndarray]


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of rectified images (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level ``level`` (2x2 box-filter downsampling)."""
        if level == 0:
            return self
        s = float(2 ** level)
        return CameraIntrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // (2 ** level),
            height=self.height // (2 ** level),
        )

    def back_project(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Rays with unit z for pixel coordinates, shape (..., 3)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def scale_pixels(coords: np.ndarray, level: int) -> np.ndarray:
    """Map level-0 pixel coordinates to pyramid level ``level``."""
    if level == 0:
        return np.asarray(coords, dtype=np.float64)
    s = float(2 ** level)
    return (np.asarray(coords, dtype=np.float64) + 0.5) / s - 0.5


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform (world-from-camera when used as a camera pose)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise PreconditionError("pose contains non-finite values")
        orthogonality = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if orthogonality > ORTHONORMAL_TOLERANCE or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise PreconditionError(f"rotation is not orthonormal (error {orthogonality:.3g})")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quaternion: Sequence[float], translation: Sequence[float]) -> "Pose":
        """Build from a Hamilton quaternion in (qx, qy, qz, qw) order."""
        return cls(Rotation.from_quat(np.asarray(quaternion, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Optional[Sequence[float]] = None) -> "Pose":
        t = np.zeros(3) if translation is None else translation
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), t)

    @classmethod
    def exp(cls, xi: Sequence[float]) -> "Pose":
        """SE(3) exponential of ``xi = (v, w)``."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        v, w = xi[:3], xi[3:]
        theta = float(np.linalg.norm(w))
        W = skew(w)
        if theta < SMALL_ANGLE:
            V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
        else:
            V = (
                np.eye(3)
                + (1.0 - np.cos(theta)) / theta ** 2 * W
                + (theta - np.sin(theta)) / theta ** 3 * (W @ W)
            )
        return cls(Rotation.from_rotvec(w).as_matrix(), V @ v)

    def log(self) -> np.ndarray:
        """Inverse of :meth:`exp`."""
        w = Rotation.from_matrix(self.rotation).as_rotvec()
        theta = float(np.linalg.norm(w))
        W = skew(w)
        if theta < SMALL_ANGLE:
            V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
        else:
            coefficient = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
            V_inv = np.eye(3) - 0.5 * W + coefficient * (W @ W)
        return np.concatenate([V_inv @ self.translation, w])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Hamilton quaternion (qx, qy, qz, qw), normalized, qw >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return q if q[3] >= 0 else -q

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def perturbed(self, delta: Sequence[float]) -> "Pose":
        """Right perturbation ``self * exp(delta)``."""
        return self.compose(Pose.exp(delta))

    def rotation_angle(self) -> float:
        """Rotation angle in radians."""
        return float(np.linalg.norm(Rotation.from_matrix(self.rotation).as_rotvec()))

    def is_close(self, other: "Pose", tolerance: float = 1e-9) -> bool:
        return bool(
            np.abs(self.rotation - other.rotation).max() <= tolerance
            and np.abs(self.translation - other.translation).max() <= tolerance
        )

    def __repr__(self) -> str:
        t = ", ".join(f"{x:.4f}" for x in self.translation)
        return f"Pose(t=[{t}], angle={np.degrees(self.rotation_angle()):.3f}deg)"


def relative_pose(host_pose: Pose, target_pose: Pose) -> Pose:
    """Target-from-host transform of two world-from-camera poses."""
    return target_pose.inverse().compose(host_pose)


# ---------------------------------------------------------------------------
# Image pyramid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PyramidLevel:
    image: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    def gradient_magnitude(self) -> np.ndarray:
        return np.hypot(self.grad_x, self.grad_y)


@dataclass(frozen=True, eq=False)
class ImagePyramid:
    levels: Tuple[PyramidLevel, ...]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> PyramidLevel:
        return self.levels[level]


def _gradients(grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # central differences inside, one-sided at the borders
    grad_x = np.gradient(grid, axis=1) if grid.shape[1] > 1 else np.zeros_like(grid)
    grad_y = np.gradient(grid, axis=0) if grid.shape[0] > 1 else np.zeros_like(grid)
    return grad_x, grad_y


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def build_pyramid(image: np.ndarray, num_levels: int) -> ImagePyramid:
    """
    Build a box-filter image pyramid with per-level gradients.

    Args:
        image: 2-D intensity grid (values in [0, 255])
        num_levels: number of levels including the full-resolution one

    Returns:
        ImagePyramid whose level ``l`` has size ``floor(size / 2**l)``

    Raises:
        ConfigurationError: if the image is too small for ``num_levels``
    """
    grid = np.array(image, dtype=np.float64)
    if grid.ndim != 2:
        raise InputError(f"expected a single-channel image, got shape {grid.shape}")
    if num_levels < 1:
        raise ConfigurationError(f"num_levels must be >= 1, got {num_levels}")
    min_side = 2 ** (num_levels - 1)
    if grid.shape[0] < min_side or grid.shape[1] < min_side:
        raise ConfigurationError(
            f"image {grid.shape[1]}x{grid.shape[0]} too small for {num_levels} pyramid levels"
        )

    levels: List[PyramidLevel] = []
    current = grid
    for level in range(num_levels):
        if level > 0:
            h, w = current.shape[0] // 2, current.shape[1] // 2
            current = current[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
        grad_x, grad_y = _gradients(current)
        levels.append(PyramidLevel(_freeze(current), _freeze(grad_x), _freeze(grad_y)))
    return ImagePyramid(tuple(levels))


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def sample_bilinear(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``grid`` at (xs, ys); coordinates are clamped at the border."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        return np.zeros(xs.shape)
    coordinates = np.vstack([ys.ravel(), xs.ravel()])
    values = map_coordinates(grid, coordinates, order=1, mode="nearest", prefilter=False)
    return values.reshape(xs.shape)


def interpolate_bilinear(grid: np.ndarray, x: ArrayLike, y: ArrayLike) -> Union[float, np.ndarray]:
    """
    Bilinear interpolation inside the image domain.

    Raises:
        PreconditionError: if any coordinate lies outside [0, width-1] x [0, height-1]
    """
    grid = np.asarray(grid, dtype=np.float64)
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    height, width = grid.shape
    if (
        np.any(xs < 0)
        or np.any(ys < 0)
        or np.any(xs > width - 1)
        or np.any(ys > height - 1)
        or not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)))
    ):
        raise PreconditionError(f"interpolation outside image {width}x{height}")
    values = sample_bilinear(grid, xs, ys)
    if values.ndim == 0:
        return float(values)
    return values


# ---------------------------------------------------------------------------
# Points and projection
# ---------------------------------------------------------------------------

class PointStatus(Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    MARGINALIZED = "marginalized"
    OUTLIER = "outlier"


_TRANSITIONS = {
    PointStatus.CANDIDATE: {PointStatus.ACTIVE, PointStatus.OUTLIER},
    PointStatus.ACTIVE: {PointStatus.MARGINALIZED, PointStatus.OUTLIER},
    PointStatus.MARGINALIZED: {PointStatus.OUTLIER},
    PointStatus.OUTLIER: {PointStatus.OUTLIER},
}


@dataclass(eq=False)
class InverseDepthPoint:
    """A pixel of a host keyframe parameterized by its inverse depth."""

    point_id: int
    host_frame_id: int
    u: float
    v: float
    idepth: float = 1.0
    idepth_variance: float = 0.0
    status: PointStatus = PointStatus.CANDIDATE
    idepth_min: float = 0.0
    idepth_max: float = float("inf")
    # epipolar tracing state (candidates only)
    trace_energy: float = float("inf")
    trace_count: int = 0
    last_pixel_interval: float = float("inf")
    last_trace_good: bool = False
    # keyframes (other than the host) this point has a residual in
    observations: Set[int] = field(default_factory=set)
    # pattern intensities and gradient weights in the host image, cached on activation
    host_values: Optional[np.ndarray] = field(default=None, repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.idepth_variance < 0:
            raise PreconditionError("idepth variance must be non-negative")

    @property
    def is_active(self) -> bool:
        return self.status is PointStatus.ACTIVE

    def transition(self, status: PointStatus) -> None:
        if status not in _TRANSITIONS[self.status]:
            raise PointStatusError(f"point {self.point_id}: {self.status.value} -> {status.value} not allowed")
        self.status = status

    def activate(self, idepth: float) -> None:
        if not idepth > 0:
            raise PreconditionError(f"point {self.point_id}: cannot activate with idepth {idepth}")
        self.transition(PointStatus.ACTIVE)
        self.idepth = float(idepth)

    def mark_outlier(self) -> None:
        self.transition(PointStatus.OUTLIER)


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    idepth: float


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    u: np.ndarray
    v: np.ndarray
    idepth: np.ndarray
    valid: np.ndarray


def in_image(u: np.ndarray, v: np.ndarray, width: int, height: int, margin: float = 0.0) -> np.ndarray:
    return (u >= margin) & (v >= margin) & (u <= width - 1 - margin) & (v <= height - 1 - margin)


def project_points(
    target_from_host: Pose,
    K: CameraIntrinsics,
    u: np.ndarray,
    v: np.ndarray,
    idepth: np.ndarray,
    margin: Optional[float] = 1.0,
    target_K: Optional[CameraIntrinsics] = None,
) -> ProjectedPoints:
    """
    Project host pixels with known inverse depth into a target camera.

    Works in scale-free form ``R m + t * idepth`` so points at infinity
    (idepth = 0) project to their rotated direction. With ``margin=None``
    only the depth sign decides validity.
    """
    target_K = K if target_K is None else target_K
    rays = K.back_project(u, v)
    idepth = np.asarray(idepth, dtype=np.float64)
    scaled = rays @ target_from_host.rotation.T + target_from_host.translation * idepth[..., None]
    z = scaled[..., 2]
    positive = z > 1e-12
    safe_z = np.where(positive, z, 1.0)
    pu = target_K.fx * scaled[..., 0] / safe_z + target_K.cx
    pv = target_K.fy * scaled[..., 1] / safe_z + target_K.cy
    new_idepth = idepth / safe_z
    valid = positive
    if margin is not None:
        valid = valid & in_image(pu, pv, target_K.width, target_K.height, margin)
    return ProjectedPoints(pu, pv, new_idepth, valid)


def project(
    point: InverseDepthPoint,
    host_pose: Pose,
    target_pose: Pose,
    K: CameraIntrinsics,
    margin: float = 1.0,
) -> Optional[Projection]:
    """
    Project a point from its host keyframe into a target keyframe.

    Returns:
        the projection, or None when the point is behind the target camera or
        falls outside the image minus ``margin`` (the residual-pattern radius)
    """
    if not point.idepth > 0:
        raise PreconditionError(f"point {point.point_id} has non-positive idepth {point.idepth}")
    projected = project_points(
        relative_pose(host_pose, target_pose),
        K,
        np.array([point.u]),
        np.array([point.v]),
        np.array([point.idepth]),
        margin=margin,
    )
    if not projected.valid[0]:
        return None
    return Projection(float(projected.u[0]), float(projected.v[0]), float(projected.idepth[0]))
