"""
Front end: keyframe decisions, candidate tracing and activation,
marginalization scheduling, initialization, and the per-frame state machine
tying them to the tracker and the window solver.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .backend import (
    OptimizationFailure,
    SolverSettings,
    marginalize,
    prune_observations,
    solve_window,
)
from .config import RunConfig
from .errors import PreconditionError
from .geometry import (
    CameraIntrinsics,
    InverseDepthPoint,
    PointStatus,
    Pose,
    PyramidLevel,
    project_points,
    relative_pose,
)
from .photometric import (
    DEFAULT_GRADIENT_CONSTANT,
    DEFAULT_HUBER_THRESHOLD,
    PATTERN,
    AffineBrightness,
    host_pattern,
    residual_block,
)
from .point_selection import select_points
from .saliency_filter import SaliencyMap
from .tracker import (
    TrackingReference,
    TrackingResult,
    TrackingStatus,
    recover_tracking,
    track_frame,
)
from .window import Frame, KeyFrame, WindowState

logger = logging.getLogger(__name__)

# weight pulling inverse depths toward 1 while the first two frames bootstrap
INIT_IDEPTH_PRIOR = 50.0
SELECTION_BORDER = 3


# ---------------------------------------------------------------------------
# Keyframe decision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyframeMetrics:
    f_t: float
    f: float
    alpha: float

    def __post_init__(self) -> None:
        if self.f_t < 0 or self.f < 0 or self.alpha < 0:
            raise PreconditionError("keyframe metrics must be non-negative")


def keyframe_metrics(
    camera: CameraIntrinsics,
    u: np.ndarray,
    v: np.ndarray,
    idepth: np.ndarray,
    kf_from_frame: Pose,
    kf_affine: AffineBrightness,
    frame_affine: AffineBrightness,
) -> KeyframeMetrics:
    """
    Flow and brightness change of a frame relative to its keyframe.

    ``f_t`` is the RMS optical flow of the full motion, ``f`` the RMS flow of
    the translation alone and ``alpha`` the absolute log brightness ratio.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(u) == 0:
        raise PreconditionError("keyframe metrics need at least one tracked point")
    frame_from_kf = kf_from_frame.inverse()
    full = project_points(frame_from_kf, camera, u, v, idepth, margin=None)
    translation_only = project_points(
        Pose(np.eye(3), frame_from_kf.translation), camera, u, v, idepth, margin=None
    )
    ok = full.valid & translation_only.valid
    if not ok.any():
        f_t = f = float("inf")
    else:
        f_t = float(np.sqrt(np.mean((full.u[ok] - u[ok]) ** 2 + (full.v[ok] - v[ok]) ** 2)))
        f = float(
            np.sqrt(np.mean((translation_only.u[ok] - u[ok]) ** 2 + (translation_only.v[ok] - v[ok]) ** 2))
        )
    alpha = abs(frame_affine.a - kf_affine.a + math.log(frame_affine.exposure / kf_affine.exposure))
    return KeyframeMetrics(f_t, f, alpha)


def normalize_metrics(metrics: KeyframeMetrics, camera: CameraIntrinsics, flow_fraction: float) -> KeyframeMetrics:
    """Express flows as fractions of ``flow_fraction * (width + height)`` pixels."""
    scale = flow_fraction * (camera.width + camera.height)
    return KeyframeMetrics(metrics.f_t / scale, metrics.f / scale, metrics.alpha)


def need_new_keyframe(
    metrics: KeyframeMetrics, w_f: float, w_ft: float, w_a: float, threshold: float
) -> bool:
    """w_f * f + w_ft * f_t + w_a * alpha > threshold."""
    if min(w_f, w_ft, w_a) < 0:
        raise PreconditionError("keyframe weights must be non-negative")
    return w_f * metrics.f + w_ft * metrics.f_t + w_a * metrics.alpha > threshold


# ---------------------------------------------------------------------------
# Candidate tracing
# ---------------------------------------------------------------------------

class TraceOutcome(Enum):
    GOOD = "good"
    SKIPPED = "skipped"  # segment out of image or behind the camera
    DEGENERATE = "degenerate"  # no parallax
    OUTLIER = "outlier"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class TraceSettings:
    huber_threshold: float = DEFAULT_HUBER_THRESHOLD
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT
    outlier_threshold: float = 12.0 * 9
    ambiguity_ratio: float = 1.1
    ambiguity_distance: float = 2.0
    min_segment: float = 0.5
    # energy rise that bounds the pixel uncertainty of a traced minimum
    energy_margin: float = 9.0
    default_pixel_radius: float = 2.0
    max_rows: int = 50_000


def _project_affine(A: np.ndarray, t: np.ndarray, rho: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    scaled = A + t[None, :] * rho[:, None]
    return np.stack(
        [K.fx * scaled[:, 0] / scaled[:, 2] + K.cx, K.fy * scaled[:, 1] / scaled[:, 2] + K.cy], axis=-1
    )


def _idepth_along_axis(
    A: np.ndarray, t: np.ndarray, coordinate: np.ndarray, axis: np.ndarray, K: CameraIntrinsics
) -> np.ndarray:
    """Invert the projection along one image axis: the inverse depth that lands on ``coordinate``."""
    focal = np.where(axis == 0, K.fx, K.fy)
    center = np.where(axis == 0, K.cx, K.cy)
    normalized = (coordinate - center) / focal
    a_axis = np.where(axis == 0, A[:, 0], A[:, 1])
    t_axis = np.where(axis == 0, t[0], t[1])
    denominator = normalized * t[2] - t_axis
    safe = np.where(np.abs(denominator) > 1e-15, denominator, 1e-15)
    return (a_axis - normalized * A[:, 2]) / safe


def _clip_segment(
    start: np.ndarray, direction: np.ndarray, width: int, height: int, margin: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Parameter range [s0, s1] of ``start + s * direction`` inside the image (s0 > s1 when empty)."""
    s0 = np.zeros(len(start))
    s1 = np.ones(len(start))
    bounds = ((margin, width - 1 - margin), (margin, height - 1 - margin))
    for axis, (lo, hi) in enumerate(bounds):
        p, d = start[:, axis], direction[:, axis]
        parallel = np.abs(d) < 1e-12
        safe = np.where(parallel, 1.0, d)
        a, b = (lo - p) / safe, (hi - p) / safe
        enter = np.minimum(a, b)
        leave = np.maximum(a, b)
        inside = (p >= lo) & (p <= hi)
        enter = np.where(parallel, np.where(inside, -np.inf, np.inf), enter)
        leave = np.where(parallel, np.where(inside, np.inf, -np.inf), leave)
        s0 = np.maximum(s0, enter)
        s1 = np.minimum(s1, leave)
    return s0, s1


def trace_candidates(
    candidates: Sequence[InverseDepthPoint],
    host: KeyFrame,
    frame_pose: Pose,
    frame_affine: AffineBrightness,
    frame_level: PyramidLevel,
    camera: CameraIntrinsics,
    settings: TraceSettings = TraceSettings(),
) -> List[TraceOutcome]:
    """
    Discrete epipolar search of every candidate of ``host`` in a new frame.

    The candidate's inverse-depth interval maps to a segment of the epipolar
    line; the pattern energy is evaluated at steps of at most one pixel, the
    best step is refined with a parabola, and the interval shrinks around it.
    The interval never widens.
    """
    outcomes = [TraceOutcome.SKIPPED] * len(candidates)
    if not candidates:
        return outcomes
    target_from_host = relative_pose(host.pose, frame_pose)
    R, t = target_from_host.rotation, target_from_host.translation
    u = np.array([c.u for c in candidates])
    v = np.array([c.v for c in candidates])
    lo = np.array([c.idepth_min for c in candidates])
    hi = np.array([c.idepth_max for c in candidates])
    A = camera.back_project(u, v) @ R.T

    in_front = (A[:, 2] + t[2] * lo > 1e-9) & (A[:, 2] + t[2] * hi > 1e-9) & (lo > 0)
    safe_lo = np.where(in_front, lo, 1.0)
    safe_hi = np.where(in_front, hi, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_lo = np.where(in_front[:, None], _project_affine(A, t, safe_lo, camera), 0.0)
        p_hi = np.where(in_front[:, None], _project_affine(A, t, safe_hi, camera), 0.0)
    direction = p_hi - p_lo
    length = np.linalg.norm(direction, axis=1)
    axis = np.where(np.abs(direction[:, 0]) >= np.abs(direction[:, 1]), 0, 1)
    s0, s1 = _clip_segment(p_lo, direction, frame_level.width, frame_level.height, PATTERN.radius + 1)
    clipped = np.maximum(s1 - s0, 0.0) * length

    for i in np.flatnonzero(in_front & (length < settings.min_segment)):
        outcomes[i] = TraceOutcome.DEGENERATE
    traceable = np.flatnonzero(in_front & (length >= settings.min_segment) & (clipped >= settings.min_segment))
    if len(traceable) == 0:
        return outcomes

    host_values, host_weights = host_pattern(host.pyramid[0], u, v, settings.gradient_constant)
    samples = np.ceil(clipped).astype(int) + 1

    for chunk in _chunks(traceable, samples, settings.max_rows):
        counts = samples[chunk]
        rows = np.repeat(chunk, counts)
        offsets = np.concatenate([np.arange(n) / (n - 1) for n in counts])
        tau = s0[rows] + (s1[rows] - s0[rows]) * offsets
        pixels = p_lo[rows] + tau[:, None] * direction[rows]
        rho = _idepth_along_axis(A[rows], t, pixels[np.arange(len(rows)), axis[rows]], axis[rows], camera)
        rho = np.clip(rho, lo[rows], hi[rows])
        block = residual_block(
            target_from_host,
            camera,
            u[rows],
            v[rows],
            rho,
            host_values[rows],
            host_weights[rows],
            host.affine,
            frame_affine,
            frame_level,
            settings.huber_threshold,
        )
        energies = np.where(block.valid, block.energies, np.inf)
        start = 0
        for i, n in zip(chunk, counts):
            window = slice(start, start + n)
            start += n
            outcomes[i] = _update_candidate(
                candidates[i],
                energies[window],
                tau[window],
                rho[window],
                clipped[i],
                length[i],
                p_lo[i],
                direction[i],
                A[i],
                t,
                axis[i],
                camera,
                settings,
            )
    return outcomes


def _chunks(indices: np.ndarray, samples: np.ndarray, max_rows: int) -> Iterator[np.ndarray]:
    current: List[int] = []
    rows = 0
    for i in indices:
        if current and rows + samples[i] > max_rows:
            yield np.array(current)
            current, rows = [], 0
        current.append(int(i))
        rows += int(samples[i])
    if current:
        yield np.array(current)


def _update_candidate(
    candidate: InverseDepthPoint,
    energies: np.ndarray,
    tau: np.ndarray,
    rho: np.ndarray,
    clipped: float,
    length: float,
    p_lo: np.ndarray,
    direction: np.ndarray,
    A: np.ndarray,
    t: np.ndarray,
    axis: int,
    camera: CameraIntrinsics,
    settings: TraceSettings,
) -> TraceOutcome:
    n = len(energies)
    best = int(np.argmin(energies))
    best_energy = float(energies[best])
    if not np.isfinite(best_energy):
        return TraceOutcome.SKIPPED
    step_px = clipped / (n - 1)
    far = np.abs(np.arange(n) - best) * step_px > settings.ambiguity_distance
    second = float(energies[far].min()) if far.any() else float("inf")

    if best_energy > settings.outlier_threshold:
        candidate.last_trace_good = False
        candidate.mark_outlier()
        return TraceOutcome.OUTLIER
    if second <= settings.ambiguity_ratio * best_energy:
        candidate.last_trace_good = False
        candidate.mark_outlier()
        return TraceOutcome.AMBIGUOUS

    offset = 0.0
    curvature = 0.0
    if 0 < best < n - 1 and np.isfinite(energies[best - 1]) and np.isfinite(energies[best + 1]):
        c = energies[best - 1] - 2.0 * energies[best] + energies[best + 1]
        if c > 0:
            offset = float(np.clip(0.5 * (energies[best - 1] - energies[best + 1]) / c, -0.5, 0.5))
            curvature = c / (step_px * step_px)
    dtau = (tau[-1] - tau[0]) / (n - 1)
    tau_best = tau[best] + offset * dtau
    radius = math.sqrt(settings.energy_margin / curvature) + 0.5 if curvature > 0 else settings.default_pixel_radius
    tau_span = radius / length
    taus = np.clip(np.array([tau_best, tau_best - tau_span, tau_best + tau_span]), 0.0, 1.0)
    pixels = p_lo[None, :] + taus[:, None] * direction[None, :]
    rhos = _idepth_along_axis(
        np.repeat(A[None, :], 3, axis=0), t, pixels[:, axis], np.full(3, axis), camera
    )

    old_min, old_max = candidate.idepth_min, candidate.idepth_max
    new_min = max(old_min, float(min(rhos[1], rhos[2])))
    new_max = min(old_max, float(max(rhos[1], rhos[2])))
    rho_best = float(np.clip(rhos[0], old_min, old_max))
    if new_min > new_max:
        new_min = new_max = rho_best
    candidate.idepth_min, candidate.idepth_max = new_min, new_max
    candidate.idepth = float(np.clip(rho_best, new_min, new_max))
    candidate.idepth_variance = ((new_max - new_min) / 4.0) ** 2
    candidate.trace_energy = best_energy
    candidate.trace_count += 1
    candidate.last_pixel_interval = 2.0 * radius
    candidate.last_trace_good = True
    return TraceOutcome.GOOD


def trace_candidate(
    candidate: InverseDepthPoint,
    host: KeyFrame,
    frame_pose: Pose,
    frame_affine: AffineBrightness,
    frame_level: PyramidLevel,
    camera: CameraIntrinsics,
    settings: TraceSettings = TraceSettings(),
) -> TraceOutcome:
    return trace_candidates([candidate], host, frame_pose, frame_affine, frame_level, camera, settings)[0]


# ---------------------------------------------------------------------------
# Activation
# ---------------------------------------------------------------------------

def _project_active(window: WindowState, target: KeyFrame) -> np.ndarray:
    positions = []
    for kf in window.keyframes:
        points = kf.active_points()
        if not points:
            continue
        projected = project_points(
            relative_pose(kf.pose, target.pose),
            window.camera,
            np.array([p.u for p in points]),
            np.array([p.v for p in points]),
            np.array([p.idepth for p in points]),
            margin=0.0,
        )
        positions.append(np.stack([projected.u, projected.v], axis=-1)[projected.valid])
    return np.concatenate(positions) if positions else np.zeros((0, 2))


def _observing_frames(window: WindowState, host: KeyFrame, points: List[InverseDepthPoint]) -> List[set]:
    observed: List[set] = [set() for _ in points]
    u = np.array([p.u for p in points])
    v = np.array([p.v for p in points])
    idepth = np.array([p.idepth for p in points])
    for kf in window.keyframes:
        if kf.frame_id == host.frame_id:
            continue
        projected = project_points(
            relative_pose(host.pose, kf.pose), window.camera, u, v, idepth, margin=PATTERN.radius
        )
        for i in np.flatnonzero(projected.valid):
            observed[i].add(kf.frame_id)
    return observed


def activate_candidates(
    window: WindowState,
    n_needed: int,
    max_pixel_interval: float = 8.0,
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT,
) -> List[InverseDepthPoint]:
    """
    Promote traced candidates to active points, spreading them out in the latest keyframe.

    Each step promotes the candidate whose projection is farthest from every
    active (or already promoted) point; ties go to the lowest trace energy,
    then the lowest variance. Promoted points take the midpoint of their
    inverse-depth interval and observe every keyframe they project into.
    """
    if n_needed <= 0:
        return []
    latest = window.latest
    entries: List[Tuple[KeyFrame, InverseDepthPoint, float]] = []
    positions = []
    for kf in window.keyframes:
        eligible = [
            p
            for p in kf.candidates()
            if p.last_trace_good and p.last_pixel_interval < max_pixel_interval and p.idepth_min > 0
        ]
        if not eligible:
            continue
        midpoints = np.array([0.5 * (p.idepth_min + p.idepth_max) for p in eligible])
        projected = project_points(
            relative_pose(kf.pose, latest.pose),
            window.camera,
            np.array([p.u for p in eligible]),
            np.array([p.v for p in eligible]),
            midpoints,
            margin=PATTERN.radius,
        )
        for i in np.flatnonzero(projected.valid):
            entries.append((kf, eligible[i], float(midpoints[i])))
            positions.append((projected.u[i], projected.v[i]))
    if not entries:
        return []

    positions_arr = np.array(positions)
    occupied = _project_active(window, latest)
    if len(occupied):
        distance = cdist(positions_arr, occupied).min(axis=1)
    else:
        distance = np.full(len(entries), np.inf)
    energies = np.array([e[1].trace_energy for e in entries])
    variances = np.array([e[1].idepth_variance for e in entries])
    available = np.ones(len(entries), dtype=bool)

    chosen: List[int] = []
    while len(chosen) < n_needed and available.any():
        masked = np.where(available, distance, -np.inf)
        top = np.flatnonzero(masked == masked.max())
        pick = int(top[np.lexsort((top, variances[top], energies[top]))[0]])
        chosen.append(pick)
        available[pick] = False
        distance = np.minimum(distance, np.linalg.norm(positions_arr - positions_arr[pick], axis=1))

    promoted: List[InverseDepthPoint] = []
    by_host: Dict[int, List[int]] = {}
    for index in chosen:
        by_host.setdefault(entries[index][0].frame_id, []).append(index)
    for indices in by_host.values():
        host = entries[indices[0]][0]
        points = [entries[i][1] for i in indices]
        for point, i in zip(points, indices):
            point.idepth = entries[i][2]
        observed = _observing_frames(window, host, points)
        values, weights = host_pattern(
            host.pyramid[0], np.array([p.u for p in points]), np.array([p.v for p in points]), gradient_constant
        )
        for row, (point, targets) in enumerate(zip(points, observed)):
            if not targets:
                continue
            point.activate(point.idepth)
            point.observations = targets
            point.host_values, point.weights = values[row], weights[row]
            promoted.append(point)
    order = {id(entries[i][1]): rank for rank, i in enumerate(chosen)}
    promoted.sort(key=lambda p: order[id(p)])
    if promoted:
        logger.debug(f"Activated {len(promoted)} of {n_needed} requested points")
    return promoted


# ---------------------------------------------------------------------------
# Marginalization scheduling
# ---------------------------------------------------------------------------

@dataclass
class MarginalizationPlan:
    frames: List[int] = field(default_factory=list)
    points: List[InverseDepthPoint] = field(default_factory=list)


def marginalization_score(centers: Dict[int, np.ndarray], frame_id: int, latest_id: int, epsilon: float) -> float:
    """sqrt(d(i, latest)) * sum over other kept keyframes k of 1 / (d(i, k) + epsilon)."""
    own = centers[frame_id]
    closeness = sum(
        1.0 / (float(np.linalg.norm(own - c)) + epsilon)
        for fid, c in centers.items()
        if fid not in (frame_id, latest_id)
    )
    return math.sqrt(float(np.linalg.norm(own - centers[latest_id]))) * closeness


def schedule_marginalization(
    window: WindowState,
    max_keyframes: int = 7,
    visible_fraction: float = 0.05,
    epsilon: float = 1e-3,
) -> MarginalizationPlan:
    """
    Pick keyframes (and their points) to leave the window.

    A keyframe with fewer than ``visible_fraction`` of its active points
    visible in the latest keyframe goes, and so does one left with no active
    points and no candidates. If more than ``max_keyframes`` remain, the one
    far from the latest and close to the others goes too.
    The two newest keyframes are never picked.
    """
    keyframes = window.keyframes
    if len(keyframes) <= 2:
        return MarginalizationPlan()
    latest = keyframes[-1]
    protected = {keyframes[-1].frame_id, keyframes[-2].frame_id}
    marked: List[int] = []
    for kf in keyframes:
        points = kf.active_points()
        if kf.frame_id in protected:
            continue
        if not points:
            if not kf.candidates():
                marked.append(kf.frame_id)
            continue
        projected = project_points(
            relative_pose(kf.pose, latest.pose),
            window.camera,
            np.array([p.u for p in points]),
            np.array([p.v for p in points]),
            np.array([p.idepth for p in points]),
            margin=0.0,
        )
        if float(np.mean(projected.valid)) < visible_fraction:
            marked.append(kf.frame_id)

    remaining = [kf for kf in keyframes if kf.frame_id not in marked]
    if len(remaining) > max_keyframes:
        centers = {kf.frame_id: kf.pose.translation for kf in remaining}
        eligible = [kf.frame_id for kf in remaining if kf.frame_id not in protected]
        scores = [marginalization_score(centers, fid, latest.frame_id, epsilon) for fid in eligible]
        marked.append(eligible[int(np.argmax(scores))])

    points = [p for kf in keyframes if kf.frame_id in marked for p in kf.active_points()]
    return MarginalizationPlan(sorted(marked), points)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

class Initializer:
    """
    Two-frame bootstrap.

    The first frame's selected points start at inverse depth 1. Each later
    frame is optimized jointly with those depths (coarse to fine, with a weak
    prior toward 1) until the translational flow reaches ``init_min_flow``
    pixels; the scene is then rescaled to mean inverse depth 1.
    """

    def __init__(self, first: Frame, camera: CameraIntrinsics, config: RunConfig, point_ids: Iterator[int]):
        self.camera = camera
        self.config = config
        self.first = KeyFrame.from_frame(first, Pose.identity(), AffineBrightness(0.0, 0.0, first.exposure))
        self.points = select_candidates(self.first, config, point_ids)
        u = np.array([p.u for p in self.points])
        v = np.array([p.v for p in self.points])
        values, weights = host_pattern(self.first.pyramid[0], u, v, config.gradient_weight_constant)
        for row, point in enumerate(self.points):
            point.activate(1.0)
            point.host_values, point.weights = values[row], weights[row]
        self.first.points = list(self.points)
        self.pose = Pose.identity()
        self.affine = AffineBrightness(0.0, 0.0, first.exposure)
        self.history: List[Tuple[int, float, Pose]] = [(first.frame_id, first.timestamp, Pose.identity())]
        self.attempts = 0
        self.failed = not self.points
        self.window: Optional[WindowState] = None
        self.settings = replace(config.solver_settings(), idepth_prior_weight=INIT_IDEPTH_PRIOR)

    @property
    def exhausted(self) -> bool:
        return self.failed or self.attempts >= self.config.init_max_frames

    def add(self, frame: Frame) -> bool:
        """Try to bootstrap with ``frame``; True once accepted."""
        self.attempts += 1
        second = KeyFrame.from_frame(
            frame, self.pose, AffineBrightness(self.affine.a, self.affine.b, frame.exposure)
        )
        for point in self.first.active_points():
            point.observations = {frame.frame_id}
        window = WindowState(self.camera, [self.first, second])
        try:
            levels = min(self.config.pyramid_levels, frame.pyramid.num_levels)
            for level in reversed(range(levels)):
                solve_window(window, self.settings, level=level)
        except OptimizationFailure as e:
            logger.warning(f"Initialization solve failed at frame {frame.frame_id}: {e}")
            self.failed = True
            return False
        self.pose, self.affine = second.pose, second.affine
        self.history.append((frame.frame_id, frame.timestamp, second.pose))

        points = self.first.active_points()
        if not points:
            self.failed = True
            return False
        flow = keyframe_metrics(
            self.camera,
            np.array([p.u for p in points]),
            np.array([p.v for p in points]),
            np.array([p.idepth for p in points]),
            second.pose,
            self.first.affine,
            second.affine,
        ).f
        logger.debug(f"Initialization frame {frame.frame_id}: translational flow {flow:.2f}px")
        if flow < self.config.init_min_flow:
            return False

        scale = float(np.mean([p.idepth for p in points]))
        for point in points:
            point.idepth /= scale
        second.pose = Pose(second.pose.rotation, second.pose.translation * scale)
        self.history = [(fid, ts, Pose(p.rotation, p.translation * scale)) for fid, ts, p in self.history]
        self.window = window
        return True


def select_candidates(keyframe: KeyFrame, config: RunConfig, point_ids: Iterator[int]) -> List[InverseDepthPoint]:
    """Run saliency-driven selection on a keyframe and wrap the pixels as candidates."""
    level = keyframe.pyramid[0]
    saliency = keyframe.saliency
    if saliency is None:
        saliency = SaliencyMap.uniform(level.height, level.width)
    selection = config.selection_config(seed=config.rng_seed + keyframe.frame_id)
    result = select_points(saliency, level.gradient_magnitude(), selection)
    x_max, y_max = level.width - SELECTION_BORDER, level.height - SELECTION_BORDER
    lo, hi = config.candidate_idepth_min, config.candidate_idepth_max
    candidates = []
    for x, y in result.points:
        if not (SELECTION_BORDER <= x < x_max and SELECTION_BORDER <= y < y_max):
            continue
        candidates.append(
            InverseDepthPoint(
                point_id=next(point_ids),
                host_frame_id=keyframe.frame_id,
                u=float(x),
                v=float(y),
                idepth=0.5 * (lo + hi),
                idepth_variance=((hi - lo) / 4.0) ** 2,
                idepth_min=lo,
                idepth_max=hi,
            )
        )
    return candidates


# ---------------------------------------------------------------------------
# Per-frame state machine
# ---------------------------------------------------------------------------

class FrameStatus(Enum):
    INITIALIZING = "initializing"
    OK = "ok"
    RECOVERED = "recovered"
    LOST = "lost"


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame_id: int
    timestamp: float
    status: FrameStatus
    is_keyframe: bool = False
    tracking: Optional[TrackingResult] = None


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: int
    timestamp: float
    keyframe_id: int
    keyframe_from_frame: Pose


class FrontEnd:
    """Runs tracking, keyframe management and window optimization frame by frame."""

    def __init__(self, camera: CameraIntrinsics, config: RunConfig):
        self.camera = camera
        self.config = config
        self.solver: SolverSettings = config.solver_settings()
        self.tracker = config.tracker_settings()
        self.trace = TraceSettings(
            huber_threshold=config.huber_threshold,
            gradient_constant=config.gradient_weight_constant,
            outlier_threshold=config.outlier_threshold,
        )
        self.window = WindowState(camera)
        self.point_ids = itertools.count()
        self.initialized = False
        self.lost = False
        self.keyframe_count = 0
        self._initializer: Optional[Initializer] = None
        self._records: List[FrameRecord] = []
        self._keyframe_poses: Dict[int, Pose] = {}
        self._reference: Optional[TrackingReference] = None
        self._last_pose = Pose.identity()
        self._previous_pose = Pose.identity()
        self._last_affine = AffineBrightness()
        self._start_time = 0.0

    # -- public -----------------------------------------------------------

    def process(self, frame: Frame) -> FrameResult:
        if self.lost:
            raise PreconditionError("tracking was lost; the run is over")
        if not self.initialized:
            return self._initialize(frame)
        return self._track(frame)

    def trajectory(self) -> List[Tuple[float, int, Pose]]:
        """(timestamp, frame id, world-from-camera) of every tracked frame."""
        poses = dict(self._keyframe_poses)
        poses.update({kf.frame_id: kf.pose for kf in self.window.keyframes})
        return [
            (r.timestamp, r.frame_id, poses[r.keyframe_id].compose(r.keyframe_from_frame))
            for r in self._records
        ]

    def point_cloud(self) -> List[Tuple[float, float, float, float]]:
        return list(self.window.retired_points)

    def flush(self) -> None:
        """Retire every remaining active point (end of run)."""
        for kf in self.window.keyframes:
            for point in kf.active_points():
                point.transition(PointStatus.MARGINALIZED)
                self.window.retire(point, kf)

    # -- initialization ---------------------------------------------------

    def _initialize(self, frame: Frame) -> FrameResult:
        if self._initializer is None or self._initializer.exhausted:
            if self._initializer is not None:
                logger.warning(f"Initialization did not converge, restarting at frame {frame.frame_id}")
            self._initializer = Initializer(frame, self.camera, self.config, self.point_ids)
            return FrameResult(frame.frame_id, frame.timestamp, FrameStatus.INITIALIZING)

        if not self._initializer.add(frame):
            return FrameResult(frame.frame_id, frame.timestamp, FrameStatus.INITIALIZING)

        init = self._initializer
        self.window = init.window
        first, second = self.window.keyframes
        prune_observations(self.window, self.config.outlier_threshold, self.solver)
        second.points = select_candidates(second, self.config, self.point_ids)
        for fid, ts, pose in init.history:
            if fid == second.frame_id:
                self._records.append(FrameRecord(fid, ts, fid, Pose.identity()))
            else:
                self._records.append(FrameRecord(fid, ts, first.frame_id, pose))
        self.keyframe_count = 2
        self.initialized = True
        self._start_time = first.timestamp
        self._previous_pose = init.history[-2][2] if len(init.history) > 1 else Pose.identity()
        self._last_pose = second.pose
        self._last_affine = second.affine
        self._reference = None
        self._initializer = None
        logger.info(
            f"Initialized on frames {first.frame_id}-{second.frame_id} "
            f"with {self.window.active_point_count()} points"
        )
        return FrameResult(frame.frame_id, frame.timestamp, FrameStatus.OK, is_keyframe=True)

    # -- tracking ---------------------------------------------------------

    def _track(self, frame: Frame) -> FrameResult:
        latest = self.window.latest
        if self._reference is None:
            try:
                self._reference = TrackingReference.from_window(
                    self.window, self.config.gradient_weight_constant
                )
            except PreconditionError as e:
                self.lost = True
                logger.error(f"Tracking lost at frame {frame.frame_id}: {e}")
                return FrameResult(frame.frame_id, frame.timestamp, FrameStatus.LOST)
        reference = self._reference

        motion = self._previous_pose.inverse().compose(self._last_pose)
        prior = latest.pose.inverse().compose(self._last_pose.compose(motion))
        result = track_frame(frame, reference, prior, self._last_affine, self.tracker)
        if result.status is TrackingStatus.LOST:
            result = recover_tracking(frame, reference, prior, self._last_affine, self.tracker)
        if result.status is TrackingStatus.LOST:
            self.lost = True
            logger.error(f"Tracking lost at frame {frame.frame_id}")
            return FrameResult(frame.frame_id, frame.timestamp, FrameStatus.LOST, tracking=result)

        world = latest.pose.compose(result.pose)
        self._previous_pose, self._last_pose = self._last_pose, world
        self._last_affine = result.affine

        for kf in self.window.keyframes:
            candidates = kf.candidates()
            if candidates:
                trace_candidates(candidates, kf, world, result.affine, frame.pyramid[0], self.camera, self.trace)
                kf.prune()

        metrics = normalize_metrics(
            keyframe_metrics(
                self.camera, reference.u, reference.v, reference.idepth, result.pose, latest.affine, result.affine
            ),
            self.camera,
            self.config.kf_flow_fraction,
        )
        threshold = self.config.kf_threshold
        if abs(frame.timestamp - self._start_time) < self.config.bootstrap_seconds:
            threshold *= self.config.bootstrap_threshold_factor
        make_keyframe = need_new_keyframe(
            metrics,
            self.config.kf_weight_flow,
            self.config.kf_weight_flow_total,
            self.config.kf_weight_brightness,
            threshold,
        )
        status = FrameStatus.RECOVERED if result.status is TrackingStatus.RECOVERED else FrameStatus.OK
        if make_keyframe:
            self._make_keyframe(frame, world, result.affine)
            self._records.append(FrameRecord(frame.frame_id, frame.timestamp, frame.frame_id, Pose.identity()))
        else:
            self._records.append(FrameRecord(frame.frame_id, frame.timestamp, latest.frame_id, result.pose))
        return FrameResult(frame.frame_id, frame.timestamp, status, make_keyframe, result)

    def _make_keyframe(self, frame: Frame, pose: Pose, affine: AffineBrightness) -> None:
        keyframe = KeyFrame.from_frame(frame, pose, affine)
        for host in self.window.keyframes:
            points = host.active_points()
            if not points:
                continue
            projected = project_points(
                relative_pose(host.pose, pose),
                self.camera,
                np.array([p.u for p in points]),
                np.array([p.v for p in points]),
                np.array([p.idepth for p in points]),
                margin=PATTERN.radius,
            )
            for i in np.flatnonzero(projected.valid):
                points[i].observations.add(keyframe.frame_id)
        self.window.add_keyframe(keyframe)
        self.keyframe_count += 1

        needed = self.config.num_points - self.window.active_point_count()
        activate_candidates(
            self.window, needed, self.config.activation_max_pixel_interval, self.config.gradient_weight_constant
        )
        solve_window(self.window, self.solver)
        prune_observations(self.window, self.config.outlier_threshold, self.solver)
        keyframe.points.extend(select_candidates(keyframe, self.config, self.point_ids))

        plan = schedule_marginalization(
            self.window,
            self.config.num_keyframes,
            self.config.marginalization_visible_fraction,
            self.config.marginalization_epsilon,
        )
        for fid in plan.frames:
            self._keyframe_poses[fid] = self.window.frame(fid).pose
        if plan.frames:
            marginalize(self.window, plan.frames, plan.points, self.solver)

        self._last_pose = keyframe.pose
        self._last_affine = keyframe.affine
        self._reference = None
        logger.info(
            f"Keyframe {keyframe.frame_id}: window {self.window.frame_ids}, "
            f"{self.window.active_point_count()} active points"
        )
