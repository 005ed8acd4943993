"""
Sliding-window photometric bundle adjustment.

Gauss-Newton with Levenberg damping over every keyframe's pose and affine
brightness and every active point's inverse depth. Point parameters are
eliminated with the Schur complement before each step; dropped frames and
points are folded into a quadratic prior the same way.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import PreconditionError, SalientOdometryError
from .geometry import InverseDepthPoint, PointStatus, relative_pose, scale_pixels
from .photometric import (
    DEFAULT_GRADIENT_CONSTANT,
    DEFAULT_HUBER_THRESHOLD,
    PATTERN,
    host_pattern,
    observation_groups,
    point_host_data,
    residual_block,
)
from .window import FRAME_PARAMS, KeyFrame, MarginalizationPrior, WindowState

logger = logging.getLogger(__name__)

DIAGONAL_EPSILON = 1e-6
POINT_EPSILON = 1e-10


class OptimizationFailure(SalientOdometryError):
    """Raised on non-finite energy or an indefinite system after maximum damping."""


@dataclass(frozen=True)
class SolverSettings:
    huber_threshold: float = DEFAULT_HUBER_THRESHOLD
    gradient_constant: float = DEFAULT_GRADIENT_CONSTANT
    # energy charged for an observation whose pattern leaves the target image
    out_of_view_energy: float = 12.0 * 9
    max_iterations: int = 6
    initial_damping: float = 1e-4
    max_damping: float = 1e8
    min_step: float = 1e-6
    min_relative_decrease: float = 1e-7
    idepth_prior_weight: float = 0.0
    idepth_prior_mean: float = 1.0
    freeze_oldest: bool = True


@dataclass(eq=False)
class LinearSystem:
    """Gauss-Newton system in block form; the point-point block is diagonal."""

    frame_ids: List[int]
    points: List[InverseDepthPoint]
    H_ff: np.ndarray
    H_fp: np.ndarray
    H_pp: np.ndarray
    g_f: np.ndarray
    g_p: np.ndarray
    energy: float = 0.0

    @property
    def ordering(self) -> Dict[int, slice]:
        """Parameter slice of every keyframe; points follow all frames in list order."""
        return {
            fid: slice(FRAME_PARAMS * i, FRAME_PARAMS * (i + 1)) for i, fid in enumerate(self.frame_ids)
        }

    def damped(self, damping: float) -> Tuple[np.ndarray, np.ndarray]:
        H_ff = self.H_ff + damping * np.diag(np.diag(self.H_ff) + DIAGONAL_EPSILON)
        H_pp = self.H_pp * (1.0 + damping) + POINT_EPSILON
        return H_ff, H_pp

    def dense(self, damping: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Full (damped) Hessian and gradient, frames first."""
        H_ff, H_pp = self.damped(damping)
        H = np.block([[H_ff, self.H_fp], [self.H_fp.T, np.diag(H_pp)]])
        return H, np.concatenate([self.g_f, self.g_p])


@dataclass
class SolveReport:
    iterations: int
    initial_energy: float
    final_energy: float
    damping: float
    converged: bool
    outliers: int = 0


@dataclass
class MarginalizationReport:
    frames: List[int] = field(default_factory=list)
    absorbed_points: int = 0
    dropped_points: int = 0


# ---------------------------------------------------------------------------
# Residual accumulation
# ---------------------------------------------------------------------------

def _host_data(
    host: KeyFrame, points: List[InverseDepthPoint], level: int, settings: SolverSettings
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    u = scale_pixels(np.array([p.u for p in points]), level)
    v = scale_pixels(np.array([p.v for p in points]), level)
    if level == 0:
        values = np.empty((len(points), PATTERN.size))
        weights = np.empty((len(points), PATTERN.size))
        for row, point in enumerate(points):
            values[row], weights[row] = point_host_data(point, host, settings.gradient_constant)
    else:
        values, weights = host_pattern(host.pyramid[level], u, v, settings.gradient_constant)
    return u, v, values, weights


def _active_subset(
    window: WindowState, points: Optional[Iterable[InverseDepthPoint]]
) -> Dict[int, List[InverseDepthPoint]]:
    active = window.active_points()
    if points is None:
        return active
    wanted = {id(p) for p in points}
    return {fid: [p for p in pts if id(p) in wanted] for fid, pts in active.items()}


def _idepth_prior(points: List[InverseDepthPoint], settings: SolverSettings) -> Tuple[float, np.ndarray]:
    if settings.idepth_prior_weight <= 0 or not points:
        return 0.0, np.zeros(len(points))
    deviation = np.array([p.idepth for p in points]) - settings.idepth_prior_mean
    return 0.5 * settings.idepth_prior_weight * float(deviation @ deviation), deviation


def window_energy(window: WindowState, settings: SolverSettings = SolverSettings(), level: int = 0) -> float:
    """Photometric energy at pyramid ``level`` plus the marginalization and idepth priors."""
    K = window.camera.scaled(level)
    active = window.active_points()
    parts: List[np.ndarray] = []
    for host, target, points in observation_groups(window.keyframes, active):
        u, v, values, weights = _host_data(host, points, level, settings)
        block = residual_block(
            relative_pose(host.pose, target.pose),
            K,
            u,
            v,
            np.array([p.idepth for p in points]),
            values,
            weights,
            host.affine,
            target.affine,
            target.pyramid[level],
            settings.huber_threshold,
        )
        parts.append(np.where(block.valid, block.energies, settings.out_of_view_energy))
    photometric = float(np.sum(np.concatenate(parts))) if parts else 0.0
    all_points = [p for pts in active.values() for p in pts]
    idepth_energy, _ = _idepth_prior(all_points, settings)
    return photometric + window.prior.energy(window.frames_by_id()) + idepth_energy


def linearize(
    window: WindowState,
    settings: SolverSettings = SolverSettings(),
    level: int = 0,
    points: Optional[Iterable[InverseDepthPoint]] = None,
    include_prior: bool = True,
) -> LinearSystem:
    """
    Accumulate J^T W J and J^T W r over every pattern residual of the window.

    W is the gradient weight times the Huber IRLS weight of each residual.
    Restricting ``points`` keeps only those points' residuals (used when
    marginalizing them).
    """
    frames = window.keyframes
    frame_ids = [kf.frame_id for kf in frames]
    slot = {fid: FRAME_PARAMS * i for i, fid in enumerate(frame_ids)}
    active = _active_subset(window, points)
    ordered = [p for kf in frames for p in active.get(kf.frame_id, [])]
    column = {id(p): j for j, p in enumerate(ordered)}

    n, m = FRAME_PARAMS * len(frames), len(ordered)
    H_ff = np.zeros((n, n))
    H_fp = np.zeros((n, m))
    H_pp = np.zeros(m)
    g_f = np.zeros(n)
    g_p = np.zeros(m)
    parts: List[np.ndarray] = []
    K = window.camera.scaled(level)

    for host, target, group in observation_groups(frames, active):
        u, v, values, weights = _host_data(host, group, level, settings)
        block = residual_block(
            relative_pose(host.pose, target.pose),
            K,
            u,
            v,
            np.array([p.idepth for p in group]),
            values,
            weights,
            host.affine,
            target.affine,
            target.pyramid[level],
            settings.huber_threshold,
            with_jacobians=True,
        )
        parts.append(np.where(block.valid, block.energies, settings.out_of_view_energy))
        W, r = block.weights, block.residuals
        J_host = np.concatenate([block.d_host, block.d_affine[..., 0:1], block.d_affine[..., 2:3]], axis=-1)
        J_target = np.concatenate(
            [block.d_target, block.d_affine[..., 1:2], block.d_affine[..., 3:4]], axis=-1
        )
        J_point = block.d_idepth
        h = slice(slot[host.frame_id], slot[host.frame_id] + FRAME_PARAMS)
        t = slice(slot[target.frame_id], slot[target.frame_id] + FRAME_PARAMS)
        cols = [column[id(p)] for p in group]

        H_ff[h, h] += np.einsum("npi,np,npj->ij", J_host, W, J_host)
        H_ht = np.einsum("npi,np,npj->ij", J_host, W, J_target)
        H_ff[h, t] += H_ht
        H_ff[t, h] += H_ht.T
        H_ff[t, t] += np.einsum("npi,np,npj->ij", J_target, W, J_target)
        H_fp[h, cols] += np.einsum("npi,np,np->in", J_host, W, J_point)
        H_fp[t, cols] += np.einsum("npi,np,np->in", J_target, W, J_point)
        H_pp[cols] += np.sum(W * J_point * J_point, axis=1)
        g_f[h] += np.einsum("npi,np,np->i", J_host, W, r)
        g_f[t] += np.einsum("npi,np,np->i", J_target, W, r)
        g_p[cols] += np.sum(W * J_point * r, axis=1)

    energy = float(np.sum(np.concatenate(parts))) if parts else 0.0
    idepth_energy, deviation = _idepth_prior(ordered, settings)
    if settings.idepth_prior_weight > 0 and m:
        H_pp += settings.idepth_prior_weight
        g_p += settings.idepth_prior_weight * deviation
        energy += idepth_energy

    if include_prior and not window.prior.is_empty:
        by_id = window.frames_by_id()
        index = np.concatenate([np.arange(FRAME_PARAMS) + slot[fid] for fid in window.prior.frame_ids])
        H_ff[np.ix_(index, index)] += window.prior.hessian
        g_f[index] += window.prior.gradient_at(by_id)
        energy += window.prior.energy(by_id)

    return LinearSystem(frame_ids, ordered, H_ff, H_fp, H_pp, g_f, g_p, energy)


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

def solve_reduced(
    system: LinearSystem, damping: float, frozen_frames: Sequence[int] = ()
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Damped Gauss-Newton step via the Schur complement of the point block.

    Args:
        system: linearized window
        damping: Levenberg factor
        frozen_frames: positions (in ``system.frame_ids``) whose parameters stay fixed

    Returns:
        (frame step, point step)

    Raises:
        numpy.linalg.LinAlgError: if the reduced system is not positive definite
    """
    H_ff, H_pp = system.damped(damping)
    free = np.ones(len(system.g_f), dtype=bool)
    for position in frozen_frames:
        free[FRAME_PARAMS * position: FRAME_PARAMS * (position + 1)] = False

    inverse = 1.0 / H_pp
    dx_f = np.zeros(len(system.g_f))
    if free.any():
        H_fp = system.H_fp[free]
        S = H_ff[np.ix_(free, free)] - (H_fp * inverse) @ H_fp.T
        rhs = -(system.g_f[free] - H_fp @ (inverse * system.g_p))
        dx_f[free] = cho_solve(cho_factor(0.5 * (S + S.T)), rhs)
    dx_p = -inverse * (system.g_p + system.H_fp.T @ dx_f)
    return dx_f, dx_p


def _snapshot(window: WindowState, points: List[InverseDepthPoint]) -> Tuple[list, np.ndarray]:
    return [(kf.pose, kf.affine) for kf in window.keyframes], np.array([p.idepth for p in points])


def _restore(window: WindowState, points: List[InverseDepthPoint], snapshot: Tuple[list, np.ndarray]) -> None:
    frames, idepths = snapshot
    for kf, (pose, affine) in zip(window.keyframes, frames):
        kf.pose, kf.affine = pose, affine
    for point, idepth in zip(points, idepths):
        point.idepth = float(idepth)


def apply_step(window: WindowState, system: LinearSystem, dx_f: np.ndarray, dx_p: np.ndarray) -> None:
    by_id = window.frames_by_id()
    for fid, block in system.ordering.items():
        step = dx_f[block]
        if not np.any(step):
            continue
        kf = by_id[fid]
        kf.pose = kf.pose.perturbed(step[:6])
        kf.affine = kf.affine.shifted(step[6], step[7])
    for point, step in zip(system.points, dx_p):
        point.idepth = float(point.idepth + step)


def _remove_negative_depths(window: WindowState) -> int:
    removed = 0
    for kf in window.keyframes:
        for point in kf.active_points():
            if not point.idepth > 0:
                point.mark_outlier()
                removed += 1
        kf.prune()
    if removed:
        logger.debug(f"Removed {removed} points with non-positive inverse depth")
    return removed


def solve_window(
    window: WindowState,
    settings: SolverSettings = SolverSettings(),
    max_iterations: Optional[int] = None,
    level: int = 0,
) -> SolveReport:
    """
    Optimize the window in place.

    The oldest keyframe's pose and affine brightness are frozen (gauge). A
    step is kept only if the total energy does not increase; otherwise the
    damping grows tenfold and the step is retried.

    Raises:
        PreconditionError: with fewer than 2 keyframes
        OptimizationFailure: on non-finite energy or an indefinite system at maximum damping
    """
    if len(window) < 2:
        raise PreconditionError(f"window solve needs >= 2 keyframes, has {len(window)}")
    window.check_consistency()
    iterations = settings.max_iterations if max_iterations is None else max_iterations
    frozen = [0] if settings.freeze_oldest else []

    system = linearize(window, settings, level)
    energy = system.energy
    if not np.isfinite(energy):
        raise OptimizationFailure("non-finite window energy")
    initial_energy = energy
    damping = settings.initial_damping
    converged = False
    done = 0

    for _ in range(iterations):
        done += 1
        accepted = False
        while True:
            try:
                dx_f, dx_p = solve_reduced(system, damping, frozen)
            except np.linalg.LinAlgError:
                dx_f = dx_p = None
            if dx_f is None or not (np.all(np.isfinite(dx_f)) and np.all(np.isfinite(dx_p))):
                damping *= 10.0
                if damping > settings.max_damping:
                    raise OptimizationFailure("reduced system indefinite at maximum damping")
                continue
            if np.sqrt(dx_f @ dx_f + dx_p @ dx_p) < settings.min_step:
                converged = True
                break
            snapshot = _snapshot(window, system.points)
            apply_step(window, system, dx_f, dx_p)
            new_energy = window_energy(window, settings, level)
            if np.isfinite(new_energy) and new_energy <= energy:
                accepted = True
                damping = max(damping * 0.5, 1e-12)
                break
            _restore(window, system.points, snapshot)
            damping *= 10.0
            if damping > settings.max_damping:
                converged = True
                break
        if not accepted:
            break
        decrease = energy - new_energy
        energy = new_energy
        if decrease <= settings.min_relative_decrease * max(abs(energy), 1e-12):
            converged = True
            break
        system = linearize(window, settings, level)

    outliers = _remove_negative_depths(window)
    logger.debug(
        f"Window solve: {done} iterations, energy {initial_energy:.2f} -> {energy:.2f}, damping {damping:.1e}"
    )
    return SolveReport(done, initial_energy, energy, damping, converged, outliers)


def prune_observations(window: WindowState, threshold: float, settings: SolverSettings = SolverSettings()) -> int:
    """
    Drop observations whose pattern energy exceeds ``threshold`` or that left the image.

    Active points left without any observation become outliers.
    """
    dropped = 0
    for host, target, group in observation_groups(window.keyframes, window.active_points()):
        u, v, values, weights = _host_data(host, group, 0, settings)
        block = residual_block(
            relative_pose(host.pose, target.pose),
            window.camera,
            u,
            v,
            np.array([p.idepth for p in group]),
            values,
            weights,
            host.affine,
            target.affine,
            target.pyramid[0],
            settings.huber_threshold,
        )
        for point, valid, energy in zip(group, block.valid, block.energies):
            if not valid or energy > threshold:
                point.observations.discard(target.frame_id)
                dropped += 1
    for kf in window.keyframes:
        for point in kf.active_points():
            if not point.observations:
                point.mark_outlier()
        kf.prune()
    return dropped


# ---------------------------------------------------------------------------
# Marginalization
# ---------------------------------------------------------------------------

def marginalize_points(system: LinearSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Schur complement of every point in ``system`` onto the frame block."""
    usable = system.H_pp > POINT_EPSILON
    H_fp = system.H_fp[:, usable]
    inverse = 1.0 / system.H_pp[usable]
    H = system.H_ff - (H_fp * inverse) @ H_fp.T
    g = system.g_f - H_fp @ (inverse * system.g_p[usable])
    return H, g


def marginalize_frames(
    hessian: np.ndarray, gradient: np.ndarray, keep: np.ndarray, drop: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Schur complement of the ``drop`` parameter indices (pseudo-inverse for rank deficiency)."""
    if len(drop) == 0:
        return hessian[np.ix_(keep, keep)], gradient[keep]
    H_kd = hessian[np.ix_(keep, drop)]
    H_dd_inv = np.linalg.pinv(hessian[np.ix_(drop, drop)], hermitian=True)
    H = hessian[np.ix_(keep, keep)] - H_kd @ H_dd_inv @ H_kd.T
    g = gradient[keep] - H_kd @ H_dd_inv @ gradient[drop]
    return H, g


def _symmetric_psd(matrix: np.ndarray) -> np.ndarray:
    if matrix.size == 0:
        return matrix
    symmetric = 0.5 * (matrix + matrix.T)
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    if eigenvalues.min() >= 0:
        return symmetric
    clipped = (eigenvectors * np.maximum(eigenvalues, 0.0)) @ eigenvectors.T
    return 0.5 * (clipped + clipped.T)


def marginalize(
    window: WindowState,
    frames_out: Sequence[int],
    points_out: Sequence[InverseDepthPoint],
    settings: SolverSettings = SolverSettings(),
) -> MarginalizationReport:
    """
    Fold departing points and keyframes into the window prior and remove them.

    Active points observed at least twice are Schur-marginalized at the current
    linearization point; other departing points become outliers and are left
    out of the exported map. Observations of remaining points onto departing
    frames are discarded.
    """
    out = set(frames_out)
    if out & set(window.frame_ids[-2:]):
        raise PreconditionError("the two newest keyframes cannot be marginalized")
    if not out <= set(window.frame_ids):
        raise PreconditionError(f"keyframes {sorted(out - set(window.frame_ids))} are not in the window")

    by_id = window.frames_by_id()
    prior = window.prior.relinearized(by_id).expanded(window.frame_ids, by_id)
    hessian, gradient = prior.hessian, prior.gradient

    departing = [p for p in points_out if p.is_active]
    for kf in window.keyframes:
        if kf.frame_id in out:
            departing.extend(p for p in kf.active_points() if all(p is not q for q in departing))
    absorbed = [p for p in departing if len(p.observations) >= 2]
    report = MarginalizationReport(frames=sorted(out))
    if absorbed:
        system = linearize(window, settings, 0, points=absorbed, include_prior=False)
        H_points, g_points = marginalize_points(system)
        hessian = hessian + H_points
        gradient = gradient + g_points
    report.absorbed_points = len(absorbed)
    report.dropped_points = len(departing) - len(absorbed)

    for point in absorbed:
        point.transition(PointStatus.MARGINALIZED)
        window.retire(point, by_id[point.host_frame_id])
    for point in departing:
        if point.is_active:
            point.transition(PointStatus.OUTLIER)

    keep = np.concatenate(
        [np.arange(FRAME_PARAMS) + FRAME_PARAMS * i for i, fid in enumerate(window.frame_ids) if fid not in out]
    )
    drop_list = [np.arange(FRAME_PARAMS) + FRAME_PARAMS * i for i, fid in enumerate(window.frame_ids) if fid in out]
    drop = np.concatenate(drop_list) if drop_list else np.zeros(0, dtype=int)
    hessian, gradient = marginalize_frames(hessian, gradient, keep, drop)

    window.keyframes = [kf for kf in window.keyframes if kf.frame_id not in out]
    for kf in window.keyframes:
        for point in kf.points:
            point.observations -= out
        kf.prune()

    window.prior = MarginalizationPrior(
        window.frame_ids,
        _symmetric_psd(hessian),
        gradient,
        {kf.frame_id: kf.pose for kf in window.keyframes},
        {kf.frame_id: (kf.affine.a, kf.affine.b) for kf in window.keyframes},
    )
    if out:
        logger.info(
            f"Marginalized keyframes {report.frames}: {report.absorbed_points} points absorbed, "
            f"{report.dropped_points} dropped"
        )
    return report
