"""
Photometric error model.

Residuals compare a 9-pixel pattern around a host pixel with its projection in
a target frame under the affine brightness transfer

    r = (I_j[p'] - b_j) - (t_j e^{a_j}) / (t_i e^{a_i}) * (I_i[p] - b_i)

and are robustified with a gradient-dependent weight and the Huber norm.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import ConfigurationError, InputError, PreconditionError
from .geometry import (
    CameraIntrinsics,
    ImagePyramid,
    InverseDepthPoint,
    Pose,
    PyramidLevel,
    in_image,
    relative_pose,
    sample_bilinear,
)

logger = logging.getLogger(__name__)

DEFAULT_HUBER_THRESHOLD = 9.0
DEFAULT_GRADIENT_CONSTANT = 50.0


@dataclass(frozen=True)
class AffineBrightness:
    """Affine brightness transfer ``(a, b)`` plus the frame's exposure time in seconds."""

    a: float = 0.0
    b: float = 0.0
    exposure: float = 1.0

    def __post_init__(self) -> None:
        if not self.exposure > 0:
            raise PreconditionError(f"exposure must be positive, got {self.exposure}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise PreconditionError("affine brightness parameters must be finite")

    def shifted(self, da: float, db: float) -> "AffineBrightness":
        return AffineBrightness(self.a + da, self.b + db, self.exposure)


def brightness_scale(host: AffineBrightness, target: AffineBrightness) -> float:
    """(t_j e^{a_j}) / (t_i e^{a_i})."""
    return float(np.exp(target.a - host.a) * target.exposure / host.exposure)


@dataclass(frozen=True, eq=False)
class ResidualPattern:
    """Pixel offsets (dx, dy) sampled around each point; the center comes first."""

    offsets: np.ndarray

    def __post_init__(self) -> None:
        offsets = np.array(self.offsets, dtype=np.float64).reshape(-1, 2)
        if len(offsets) != 9:
            raise ConfigurationError(f"residual pattern needs 9 offsets, got {len(offsets)}")
        as_set = {tuple(o) for o in offsets}
        if (0.0, 0.0) not in as_set or any((-dx, -dy) not in as_set for dx, dy in as_set):
            raise ConfigurationError("residual pattern must contain the center and be symmetric")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def eight_neighbors(cls) -> "ResidualPattern":
        return cls([(0, 0), (-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)])

    @property
    def size(self) -> int:
        return len(self.offsets)

    @property
    def radius(self) -> float:
        return float(np.abs(self.offsets).max())


PATTERN = ResidualPattern.eight_neighbors()


# ---------------------------------------------------------------------------
# Robust norm and weights
# ---------------------------------------------------------------------------

def huber(x: Union[float, np.ndarray], gamma: float) -> Union[float, np.ndarray]:
    """Huber norm: x^2/2 inside ``gamma``, linear outside."""
    if not gamma > 0:
        raise PreconditionError(f"huber threshold must be positive, got {gamma}")
    a = np.abs(x)
    value = np.where(a <= gamma, 0.5 * a * a, gamma * (a - 0.5 * gamma))
    return float(value) if np.ndim(value) == 0 else value


def huber_weight(x: np.ndarray, gamma: float) -> np.ndarray:
    """IRLS weight of the Huber norm: 1 inside ``gamma``, gamma/|x| outside."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(a <= gamma, 1.0, gamma / np.maximum(a, 1e-300))


def gradient_weight(grad_mag2: Union[float, np.ndarray], c: float) -> Union[float, np.ndarray]:
    """w_p = c^2 / (c^2 + |grad I|^2)."""
    if not c > 0:
        raise PreconditionError(f"gradient weight constant must be positive, got {c}")
    grad_mag2 = np.asarray(grad_mag2, dtype=np.float64)
    if np.any(grad_mag2 < 0):
        raise PreconditionError("squared gradient magnitude must be non-negative")
    value = c * c / (c * c + grad_mag2)
    return float(value) if value.ndim == 0 else value


# ---------------------------------------------------------------------------
# Residual evaluation
# ---------------------------------------------------------------------------

def host_pattern(
    level: PyramidLevel,
    u: np.ndarray,
    v: np.ndarray,
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT,
    pattern: ResidualPattern = PATTERN,
) -> Tuple[np.ndarray, np.ndarray]:
    """Host intensities and gradient weights at every pattern pixel, shape (N, |pattern|)."""
    pu = np.asarray(u, dtype=np.float64)[:, None] + pattern.offsets[None, :, 0]
    pv = np.asarray(v, dtype=np.float64)[:, None] + pattern.offsets[None, :, 1]
    pu = np.clip(pu, 0, level.width - 1)
    pv = np.clip(pv, 0, level.height - 1)
    values = sample_bilinear(level.image, pu, pv)
    gx = sample_bilinear(level.grad_x, pu, pv)
    gy = sample_bilinear(level.grad_y, pu, pv)
    return values, gradient_weight(gx * gx + gy * gy, gradient_constant)


@dataclass(frozen=True, eq=False)
class ResidualBlock:
    """Residuals of N points of one host in one target frame.

    Jacobians (when requested) are with respect to right perturbations of the
    target pose (6), the host pose (6), each point's inverse depth, and the
    affine parameters ordered (a_host, a_target, b_host, b_target).
    """

    residuals: np.ndarray  # (N, P)
    valid: np.ndarray  # (N,)
    weights: np.ndarray  # (N, P), gradient weight times Huber IRLS weight
    energies: np.ndarray  # (N,)
    target_u: np.ndarray  # (N, P)
    target_v: np.ndarray  # (N, P)
    d_target: Optional[np.ndarray] = None  # (N, P, 6)
    d_host: Optional[np.ndarray] = None  # (N, P, 6)
    d_idepth: Optional[np.ndarray] = None  # (N, P)
    d_affine: Optional[np.ndarray] = None  # (N, P, 4)

    @property
    def energy(self) -> float:
        return float(np.sum(self.energies[self.valid]))


def residual_block(
    target_from_host: Pose,
    K: CameraIntrinsics,
    u: np.ndarray,
    v: np.ndarray,
    idepth: np.ndarray,
    host_values: np.ndarray,
    weights: np.ndarray,
    host_affine: AffineBrightness,
    target_affine: AffineBrightness,
    target_level: PyramidLevel,
    gamma: float = DEFAULT_HUBER_THRESHOLD,
    pattern: ResidualPattern = PATTERN,
    with_jacobians: bool = False,
) -> ResidualBlock:
    """
    Evaluate the pattern residuals of many points of one host in one target.

    All pattern pixels are projected with the center's inverse depth. A point
    is valid when every pattern pixel lands in front of the target camera and
    inside the target image; invalid points get zero residuals, energies and
    Jacobians.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    idepth = np.asarray(idepth, dtype=np.float64)
    n = len(u)
    offsets = pattern.offsets

    pu = u[:, None] + offsets[None, :, 0]
    pv = v[:, None] + offsets[None, :, 1]
    rays = K.back_project(pu, pv)  # (N, P, 3)
    rho = np.where(idepth > 0, idepth, 1.0)[:, None]
    R = target_from_host.rotation
    scaled = rays @ R.T + target_from_host.translation * rho[..., None]  # rho * X_target
    z = scaled[..., 2]
    in_front = z > 1e-12
    safe_z = np.where(in_front, z, 1.0)
    xn = scaled[..., 0] / safe_z
    yn = scaled[..., 1] / safe_z
    tu = K.fx * xn + K.cx
    tv = K.fy * yn + K.cy
    inside = in_front & in_image(tu, tv, target_level.width, target_level.height)
    valid = inside.all(axis=1) & (idepth > 0)

    su = np.where(valid[:, None], tu, 0.0)
    sv = np.where(valid[:, None], tv, 0.0)
    target_values = sample_bilinear(target_level.image, su, sv)
    scale = brightness_scale(host_affine, target_affine)
    host_centered = host_values - host_affine.b
    residuals = target_values - target_affine.b - scale * host_centered
    residuals = np.where(valid[:, None], residuals, 0.0)
    energies = np.sum(weights * huber(residuals, gamma), axis=1)
    energies = np.where(valid, energies, 0.0)
    irls = np.where(valid[:, None], weights * huber_weight(residuals, gamma), 0.0)

    if not with_jacobians:
        return ResidualBlock(residuals, valid, irls, energies, tu, tv)

    gx = sample_bilinear(target_level.grad_x, su, sv) * K.fx
    gy = sample_bilinear(target_level.grad_y, su, sv) * K.fy
    inv_z = rho / safe_z  # 1 / true depth in the target
    dr_dx = np.stack([gx, gy, -(gx * xn + gy * yn)], axis=-1) * inv_z[..., None]  # (N, P, 3)
    x_target = scaled / rho[..., None]
    x_host = rays / rho[..., None]

    d_target = np.concatenate([-dr_dx, np.cross(dr_dx, x_target)], axis=-1)
    dr_dx_host = dr_dx @ R
    d_host = np.concatenate([dr_dx_host, -np.cross(dr_dx_host, x_host)], axis=-1)
    d_idepth = -np.einsum("npk,npk->np", dr_dx_host, rays) / (rho * rho)
    d_affine = np.empty((n, offsets.shape[0], 4))
    d_affine[..., 0] = scale * host_centered
    d_affine[..., 1] = -scale * host_centered
    d_affine[..., 2] = scale
    d_affine[..., 3] = -1.0

    mask = valid[:, None, None]
    return ResidualBlock(
        residuals,
        valid,
        irls,
        energies,
        tu,
        tv,
        d_target=np.where(mask, d_target, 0.0),
        d_host=np.where(mask, d_host, 0.0),
        d_idepth=np.where(valid[:, None], d_idepth, 0.0),
        d_affine=np.where(mask, d_affine, 0.0),
    )


class PhotometricFrame(Protocol):
    frame_id: int
    pose: Pose
    affine: AffineBrightness
    pyramid: ImagePyramid


@dataclass(frozen=True, eq=False)
class PointResidual:
    energy: float
    residuals: np.ndarray


def point_host_data(
    point: InverseDepthPoint,
    host: PhotometricFrame,
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT,
    pattern: ResidualPattern = PATTERN,
) -> Tuple[np.ndarray, np.ndarray]:
    """Cached (or freshly sampled) level-0 host pattern values and weights."""
    if point.host_values is not None and point.weights is not None:
        return point.host_values, point.weights
    values, weights = host_pattern(
        host.pyramid[0], np.array([point.u]), np.array([point.v]), gradient_constant, pattern
    )
    return values[0], weights[0]


def point_residual(
    point: InverseDepthPoint,
    host: PhotometricFrame,
    target: PhotometricFrame,
    K: CameraIntrinsics,
    gamma: float = DEFAULT_HUBER_THRESHOLD,
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT,
    pattern: ResidualPattern = PATTERN,
) -> Optional[PointResidual]:
    """
    Photometric error of one point of ``host`` in ``target``.

    Returns:
        PointResidual, or None when the pattern falls out of view
    """
    if not point.idepth > 0:
        raise PreconditionError(f"point {point.point_id} has non-positive idepth {point.idepth}")
    values, weights = point_host_data(point, host, gradient_constant, pattern)
    block = residual_block(
        relative_pose(host.pose, target.pose),
        K,
        np.array([point.u]),
        np.array([point.v]),
        np.array([point.idepth]),
        values[None, :],
        weights[None, :],
        host.affine,
        target.affine,
        target.pyramid[0],
        gamma,
        pattern,
    )
    if not block.valid[0]:
        return None
    return PointResidual(float(block.energies[0]), block.residuals[0])


class PhotometricWindow(Protocol):
    camera: CameraIntrinsics

    @property
    def keyframes(self) -> Sequence[PhotometricFrame]:
        ...


def observation_groups(
    frames: Sequence[PhotometricFrame],
    active_points: Dict[int, List[InverseDepthPoint]],
) -> Iterable[Tuple[PhotometricFrame, PhotometricFrame, List[InverseDepthPoint]]]:
    """Yield (host, target, points) for every observed (host, target) pair, in window order."""
    by_id = {frame.frame_id: frame for frame in frames}
    for host in frames:
        groups: Dict[int, List[InverseDepthPoint]] = {}
        for point in active_points.get(host.frame_id, []):
            for target_id in sorted(point.observations):
                if target_id == host.frame_id:
                    continue
                if target_id not in by_id:
                    raise PreconditionError(
                        f"point {point.point_id} observes frame {target_id} outside the window"
                    )
                groups.setdefault(target_id, []).append(point)
        for target in frames:
            if target.frame_id in groups:
                yield host, target, groups[target.frame_id]


def total_energy(
    window: PhotometricWindow,
    gamma: float = DEFAULT_HUBER_THRESHOLD,
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT,
    out_of_view_energy: float = 0.0,
    pattern: ResidualPattern = PATTERN,
) -> float:
    """
    Photometric energy summed over every active point and every observation.

    Observations whose pattern falls out of view add ``out_of_view_energy``.
    """
    frames = list(window.keyframes)
    active = {
        frame.frame_id: [p for p in getattr(frame, "points", []) if p.is_active] for frame in frames
    }
    parts: List[np.ndarray] = []
    for host, target, points in observation_groups(frames, active):
        values = np.empty((len(points), pattern.size))
        weights = np.empty((len(points), pattern.size))
        for row, point in enumerate(points):
            values[row], weights[row] = point_host_data(point, host, gradient_constant, pattern)
        block = residual_block(
            relative_pose(host.pose, target.pose),
            window.camera,
            np.array([p.u for p in points]),
            np.array([p.v for p in points]),
            np.array([p.idepth for p in points]),
            values,
            weights,
            host.affine,
            target.affine,
            target.pyramid[0],
            gamma,
            pattern,
        )
        parts.append(np.where(block.valid, block.energies, out_of_view_energy))
    if not parts:
        return 0.0
    return float(np.sum(np.concatenate(parts)))


# ---------------------------------------------------------------------------
# Photometric calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhotometricCalibration:
    """Inverse camera response (256 entries) and per-pixel vignette in (0, 1]."""

    inverse_response: np.ndarray
    vignette: np.ndarray

    def __post_init__(self) -> None:
        response = np.array(self.inverse_response, dtype=np.float64).reshape(-1)
        vignette = np.array(self.vignette, dtype=np.float64)
        if response.shape != (256,):
            raise ConfigurationError(f"inverse response needs 256 entries, got {response.shape[0]}")
        if np.any(np.diff(response) < 0):
            raise ConfigurationError("inverse response must be non-decreasing")
        if vignette.ndim != 2 or np.any(vignette <= 0) or np.any(vignette > 1):
            raise ConfigurationError("vignette must be a 2-D grid with values in (0, 1]")
        response.setflags(write=False)
        vignette.setflags(write=False)
        object.__setattr__(self, "inverse_response", response)
        object.__setattr__(self, "vignette", vignette)

    @classmethod
    def identity(cls, height: int, width: int) -> "PhotometricCalibration":
        return cls(np.arange(256, dtype=np.float64), np.ones((height, width)))


def apply_photometric_calibration(raw: np.ndarray, calib: PhotometricCalibration) -> np.ndarray:
    """corrected = inverse_response[raw] / vignette."""
    raw = np.asarray(raw)
    if raw.shape != calib.vignette.shape:
        raise InputError(f"image {raw.shape} does not match vignette {calib.vignette.shape}")
    index = np.clip(np.rint(raw), 0, 255).astype(np.intp)
    return calib.inverse_response[index] / calib.vignette


def load_photometric_calibration(
    pcalib_path: Union[str, Path], vignette_path: Union[str, Path]
) -> PhotometricCalibration:
    """Read TUM monoVO ``pcalib.txt`` (256 response samples) and ``vignette.png``."""
    pcalib_path, vignette_path = Path(pcalib_path), Path(vignette_path)
    if not pcalib_path.exists():
        raise ConfigurationError(f"response calibration not found: {pcalib_path}")
    try:
        response = np.array([float(x) for x in pcalib_path.read_text().split()])
    except ValueError as e:
        raise ConfigurationError(f"malformed response calibration {pcalib_path}: {e}") from e
    raw = cv2.imread(str(vignette_path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ConfigurationError(f"cannot read vignette {vignette_path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    vignette = raw.astype(np.float64)
    vignette /= vignette.max()
    if np.any(vignette <= 0):
        logger.warning(f"Vignette {vignette_path} has zero pixels, clamping to 1e-3")
        vignette = np.maximum(vignette, 1e-3)
    logger.info(f"Loaded photometric calibration from {pcalib_path.parent}")
    return PhotometricCalibration(response, vignette)
