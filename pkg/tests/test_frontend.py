"""Tests for keyframe decisions, candidate tracing, activation and marginalization scheduling."""

import math

import numpy as np
import pytest

from salient_odometry.config import RunConfig
from salient_odometry.errors import PreconditionError
from salient_odometry.frontend import (
    FrameStatus,
    FrontEnd,
    KeyframeMetrics,
    TraceOutcome,
    activate_candidates,
    keyframe_metrics,
    marginalization_score,
    need_new_keyframe,
    normalize_metrics,
    schedule_marginalization,
    trace_candidate,
    trace_candidates,
)
from salient_odometry.geometry import InverseDepthPoint, PointStatus, Pose, build_pyramid
from salient_odometry.photometric import AffineBrightness
from salient_odometry.synthetic import desk_scene, generate_scene
from salient_odometry.window import Frame, KeyFrame, WindowState

from conftest import smooth_image

WALL_DEPTH = 2.0


# ---------------------------------------------------------------------------
# Keyframe metrics
# ---------------------------------------------------------------------------

def grid_points(camera, idepth=0.5):
    vs, us = np.mgrid[20:100:10, 20:140:10].astype(np.float64)
    u, v = us.ravel(), vs.ravel()
    return u, v, np.full(len(u), idepth)


def test_metrics_vanish_without_motion(camera):
    u, v, idepth = grid_points(camera)
    metrics = keyframe_metrics(camera, u, v, idepth, Pose.identity(), AffineBrightness(), AffineBrightness())
    assert metrics.f_t == pytest.approx(0.0, abs=1e-12)
    assert metrics.f == pytest.approx(0.0, abs=1e-12)
    assert metrics.alpha == pytest.approx(0.0, abs=1e-12)


def test_doubled_exposure_gives_log_two(camera):
    u, v, idepth = grid_points(camera)
    metrics = keyframe_metrics(
        camera, u, v, idepth, Pose.identity(), AffineBrightness(0.0, 0.0, 0.01), AffineBrightness(0.0, 0.0, 0.02)
    )
    assert metrics.alpha == pytest.approx(math.log(2.0), abs=1e-12)


def test_affine_offsets_enter_alpha(camera):
    u, v, idepth = grid_points(camera)
    metrics = keyframe_metrics(
        camera, u, v, idepth, Pose.identity(), AffineBrightness(0.3, 5.0), AffineBrightness(-0.2, 1.0)
    )
    assert metrics.alpha == pytest.approx(0.5, abs=1e-12)


def test_lateral_translation_flow(camera, rng):
    u, v, _ = grid_points(camera)
    idepth = rng.uniform(0.2, 1.0, size=len(u))
    tx = 0.05
    metrics = keyframe_metrics(
        camera, u, v, idepth, Pose(np.eye(3), [tx, 0.0, 0.0]), AffineBrightness(), AffineBrightness()
    )
    expected = math.sqrt(float(np.mean((camera.fx * tx * idepth) ** 2)))
    assert metrics.f == pytest.approx(expected, rel=1e-6)
    assert metrics.f_t == pytest.approx(expected, rel=1e-6)


def test_pure_rotation_has_no_translational_flow(camera):
    u, v, idepth = grid_points(camera)
    rotation = Pose.from_rotvec([0.0, np.radians(2.0), 0.0])
    metrics = keyframe_metrics(camera, u, v, idepth, rotation, AffineBrightness(), AffineBrightness())
    assert metrics.f == pytest.approx(0.0, abs=1e-9)
    assert metrics.f_t > 3.0


def test_metrics_need_points(camera):
    with pytest.raises(PreconditionError):
        keyframe_metrics(
            camera, np.array([]), np.array([]), np.array([]), Pose.identity(), AffineBrightness(), AffineBrightness()
        )


def test_negative_metrics_are_rejected():
    with pytest.raises(PreconditionError):
        KeyframeMetrics(-0.1, 0.0, 0.0)


def test_normalize_metrics(camera):
    normalized = normalize_metrics(KeyframeMetrics(11.2, 5.6, 0.3), camera, 0.04)
    assert normalized.f_t == pytest.approx(1.0)
    assert normalized.f == pytest.approx(0.5)
    assert normalized.alpha == pytest.approx(0.3)


def test_keyframe_criterion():
    metrics = KeyframeMetrics(f_t=0.3, f=0.4, alpha=0.2)
    assert need_new_keyframe(metrics, 1.0, 1.0, 1.0, 0.8)
    assert not need_new_keyframe(metrics, 1.0, 1.0, 1.0, 1.0)
    assert not need_new_keyframe(KeyframeMetrics(0.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0)
    assert need_new_keyframe(KeyframeMetrics(0.0, 0.0, 0.5), 0.0, 0.0, 2.0, 0.9)


def test_keyframe_criterion_rejects_negative_weights():
    with pytest.raises(PreconditionError):
        need_new_keyframe(KeyframeMetrics(1.0, 1.0, 1.0), 1.0, -1.0, 1.0, 0.5)


def test_keyframe_criterion_is_monotone(rng):
    for _ in range(200):
        base = KeyframeMetrics(*rng.uniform(0, 1, size=3))
        bump = rng.uniform(0, 0.5, size=3)
        larger = KeyframeMetrics(base.f_t + bump[0], base.f + bump[1], base.alpha + bump[2])
        weights = rng.uniform(0, 2, size=3)
        threshold = float(rng.uniform(0, 3))
        if need_new_keyframe(base, *weights, threshold):
            assert need_new_keyframe(larger, *weights, threshold)


# ---------------------------------------------------------------------------
# Candidate tracing
# ---------------------------------------------------------------------------

def wall_texture(xs, ys):
    """Intensities of a fronto-parallel wall, non-periodic within any tracing segment."""
    return (
        128.0
        + 40.0 * np.sin(2 * np.pi * xs / 37.0 + 0.4)
        + 30.0 * np.sin(2 * np.pi * ys / 23.0 + 1.1)
        + 25.0 * np.sin(2 * np.pi * (xs + ys) / 53.0)
    )


def wall_image(camera, shift=0.0):
    """The wall seen by a camera moved ``shift`` pixels of disparity to the right."""
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    return wall_texture(xs + shift, ys)


def wall_keyframe(camera):
    return KeyFrame(0, 0.0, build_pyramid(wall_image(camera), 1), Pose.identity(), AffineBrightness())


def wall_candidates(lo=0.05, hi=2.0):
    vs, us = np.mgrid[20:101:16, 40:141:16].astype(np.float64)
    return [
        InverseDepthPoint(i, 0, float(u), float(v), idepth=0.5 * (lo + hi), idepth_min=lo, idepth_max=hi)
        for i, (u, v) in enumerate(zip(us.ravel(), vs.ravel()))
    ]


def test_tracing_converges_on_a_wall(camera):
    host = wall_keyframe(camera)
    candidates = wall_candidates()
    for tx in (0.02, 0.04, 0.06, 0.08, 0.10):
        shift = camera.fx * tx / WALL_DEPTH
        level = build_pyramid(wall_image(camera, shift), 1)[0]
        before = [(c.idepth_min, c.idepth_max) for c in candidates]
        live = [c for c in candidates if c.status is PointStatus.CANDIDATE]
        trace_candidates(live, host, Pose(np.eye(3), [tx, 0.0, 0.0]), AffineBrightness(), level, camera)
        for c, (lo, hi) in zip(candidates, before):
            if c.status is PointStatus.CANDIDATE:
                assert c.idepth_min >= lo - 1e-12
                assert c.idepth_max <= hi + 1e-12

    traced = [c for c in candidates if c.status is PointStatus.CANDIDATE and c.trace_count > 0]
    assert len(traced) >= len(candidates) // 2
    errors = [abs(c.idepth - 1.0 / WALL_DEPTH) * WALL_DEPTH for c in traced]
    assert float(np.median(errors)) < 0.05
    assert all(c.last_trace_good for c in traced)


def test_pure_rotation_is_degenerate(camera):
    host = wall_keyframe(camera)
    candidate = wall_candidates()[10]
    level = build_pyramid(wall_image(camera), 1)[0]
    rotated = Pose.from_rotvec([0.0, np.radians(2.0), 0.0])

    outcome = trace_candidate(candidate, host, rotated, AffineBrightness(), level, camera)

    assert outcome is TraceOutcome.DEGENERATE
    assert (candidate.idepth_min, candidate.idepth_max) == (0.05, 2.0)
    assert candidate.status is PointStatus.CANDIDATE
    assert candidate.trace_count == 0


def test_noise_target_marks_outlier(camera, rng):
    host = wall_keyframe(camera)
    candidate = wall_candidates()[10]
    level = build_pyramid(rng.uniform(0, 255, size=(camera.height, camera.width)), 1)[0]

    outcome = trace_candidate(candidate, host, Pose(np.eye(3), [0.1, 0.0, 0.0]), AffineBrightness(), level, camera)

    assert outcome is TraceOutcome.OUTLIER
    assert candidate.status is PointStatus.OUTLIER
    assert not candidate.last_trace_good


def test_repetitive_texture_is_ambiguous(camera):
    ys = np.mgrid[0 : camera.height, 0 : camera.width][0].astype(np.float64)
    stripes = 128.0 + 60.0 * np.sin(2 * np.pi * ys / 6.0)
    host = KeyFrame(0, 0.0, build_pyramid(stripes, 1), Pose.identity(), AffineBrightness())
    candidate = InverseDepthPoint(0, 0, 80.0, 61.0, idepth=1.0, idepth_min=0.05, idepth_max=2.0)
    level = build_pyramid(stripes + 3.0, 1)[0]

    outcome = trace_candidate(candidate, host, Pose(np.eye(3), [0.1, 0.0, 0.0]), AffineBrightness(), level, camera)

    assert outcome is TraceOutcome.AMBIGUOUS
    assert candidate.status is PointStatus.OUTLIER


def test_segment_behind_camera_is_skipped(camera):
    host = wall_keyframe(camera)
    candidate = wall_candidates()[10]
    level = build_pyramid(wall_image(camera), 1)[0]

    outcome = trace_candidate(candidate, host, Pose(np.eye(3), [0.0, 0.0, 3.0]), AffineBrightness(), level, camera)

    assert outcome is TraceOutcome.SKIPPED
    assert (candidate.idepth_min, candidate.idepth_max) == (0.05, 2.0)
    assert candidate.status is PointStatus.CANDIDATE


def test_empty_candidate_list():
    assert trace_candidates([], None, Pose.identity(), AffineBrightness(), None, None) == []


# ---------------------------------------------------------------------------
# Activation
# ---------------------------------------------------------------------------

BASELINE = 0.05


def two_keyframe_window(camera):
    image = smooth_image()
    first = KeyFrame(0, 0.0, build_pyramid(image, 1), Pose.identity(), AffineBrightness())
    second = KeyFrame(1, 0.1, build_pyramid(image, 1), Pose(np.eye(3), [BASELINE, 0.0, 0.0]), AffineBrightness())
    return WindowState(camera, [first, second])


def traced_candidate(point_id, u, v, idepth=0.5, energy=1.0, variance=0.01, interval=1.0):
    point = InverseDepthPoint(
        point_id, 0, float(u), float(v), idepth=idepth, idepth_variance=variance,
        idepth_min=idepth, idepth_max=idepth,
    )
    point.trace_energy = energy
    point.last_pixel_interval = interval
    point.last_trace_good = True
    return point


def active_point(point_id, u, v, idepth=0.5):
    point = InverseDepthPoint(point_id, 0, float(u), float(v))
    point.activate(idepth)
    point.observations = {1}
    return point


def test_farthest_candidate_is_activated_first(camera):
    window = two_keyframe_window(camera)
    near = traced_candidate(1, 82, 60)
    corner = traced_candidate(2, 20, 20)
    window.keyframes[0].points = [active_point(0, 80, 60), near, corner]

    promoted = activate_candidates(window, 2)

    assert [p.point_id for p in promoted] == [2, 1]
    assert all(p.status is PointStatus.ACTIVE for p in promoted)
    assert all(p.observations == {1} for p in promoted)
    assert all(p.host_values is not None for p in promoted)


def test_ties_go_to_lowest_energy_then_variance(camera):
    window = two_keyframe_window(camera)
    window.keyframes[0].points = [
        traced_candidate(0, 40, 40, energy=5.0, variance=0.0),
        traced_candidate(1, 80, 60, energy=2.0, variance=0.3),
        traced_candidate(2, 120, 80, energy=2.0, variance=0.1),
    ]
    promoted = activate_candidates(window, 1)
    assert [p.point_id for p in promoted] == [2]
    assert window.keyframes[0].points[0].status is PointStatus.CANDIDATE


def greedy_oracle(positions, occupied, count):
    order = []
    taken = [np.asarray(o, dtype=np.float64) for o in occupied]
    remaining = list(range(len(positions)))
    while remaining and len(order) < count:
        def spread(i):
            if not taken:
                return np.inf
            return min(float(np.linalg.norm(positions[i] - o)) for o in taken)

        best = max(remaining, key=spread)
        order.append(best)
        taken.append(positions[best])
        remaining.remove(best)
    return order


@pytest.mark.parametrize("seed", range(5))
def test_activation_matches_greedy_oracle(camera, seed):
    generator = np.random.default_rng(seed)
    window = two_keyframe_window(camera)
    vs, us = np.mgrid[25:100:20, 25:140:25].astype(np.float64)
    us = us.ravel() + generator.uniform(-4, 4, size=us.size)
    vs = vs.ravel() + generator.uniform(-4, 4, size=vs.size)
    candidates = [traced_candidate(i + 1, u, v) for i, (u, v) in enumerate(zip(us, vs))]
    window.keyframes[0].points = [active_point(0, 80, 60)] + candidates

    promoted = activate_candidates(window, 8)

    shift = camera.fx * BASELINE * 0.5
    positions = np.stack([us - shift, vs], axis=-1)
    expected = greedy_oracle(positions, [(80 - shift, 60)], 8)
    assert [p.point_id for p in promoted] == [i + 1 for i in expected]


def test_ineligible_candidates_stay_candidates(camera):
    window = two_keyframe_window(camera)
    untraced = traced_candidate(0, 40, 40)
    untraced.last_trace_good = False
    wide = traced_candidate(1, 80, 60, interval=8.0)
    unbounded = traced_candidate(2, 120, 80)
    unbounded.idepth_min = 0.0
    window.keyframes[0].points = [untraced, wide, unbounded]

    assert activate_candidates(window, 10) == []
    assert all(p.status is PointStatus.CANDIDATE for p in window.keyframes[0].points)


def test_activation_with_nothing_needed(camera):
    window = two_keyframe_window(camera)
    window.keyframes[0].points = [traced_candidate(0, 40, 40)]
    assert activate_candidates(window, 0) == []


# ---------------------------------------------------------------------------
# Marginalization scheduling
# ---------------------------------------------------------------------------

def keyframe_at(camera, frame_id, x, rotation=None, with_points=True):
    image = smooth_image()
    pose = Pose(np.eye(3) if rotation is None else rotation, [x, 0.0, 0.0])
    kf = KeyFrame(frame_id, 0.1 * frame_id, build_pyramid(image, 1), pose, AffineBrightness())
    if with_points:
        kf.points = [active_point(1000 * frame_id + i, 60 + 10 * i, 60, idepth=0.5) for i in range(4)]
    else:
        kf.points = [traced_candidate(1000 * frame_id, 60, 60)]
    return kf


def test_covisible_window_keeps_everything(camera):
    window = WindowState(camera, [keyframe_at(camera, i, 0.02 * i) for i in range(7)])
    plan = schedule_marginalization(window, max_keyframes=7)
    assert plan.frames == []
    assert plan.points == []


def test_keyframe_facing_away_is_marked(camera):
    turned = Pose.from_rotvec([0.0, np.pi, 0.0]).rotation
    frames = [keyframe_at(camera, 0, 0.0), keyframe_at(camera, 1, 0.02, rotation=turned)]
    frames += [keyframe_at(camera, i, 0.02 * i) for i in range(2, 5)]
    window = WindowState(camera, frames)

    plan = schedule_marginalization(window, max_keyframes=7)

    assert plan.frames == [1]
    assert {p.point_id for p in plan.points} == {1000, 1001, 1002, 1003}


def score_oracle(xs, i, latest, epsilon):
    closeness = sum(1.0 / (abs(xs[i] - xs[k]) + epsilon) for k in xs if k not in (i, latest))
    return math.sqrt(abs(xs[i] - xs[latest])) * closeness


def test_distance_score_picks_oracle_keyframe(camera):
    positions = [0.0, 0.1, 0.15, 0.3, 0.6, 0.65, 1.0, 1.3]
    window = WindowState(
        camera, [keyframe_at(camera, i, x, with_points=False) for i, x in enumerate(positions)]
    )
    plan = schedule_marginalization(window, max_keyframes=7, epsilon=1e-3)

    xs = dict(enumerate(positions))
    eligible = range(len(positions) - 2)
    expected = max(eligible, key=lambda i: score_oracle(xs, i, 7, 1e-3))
    assert plan.frames == [expected]


def test_marginalization_score_excludes_self_and_latest():
    centers = {0: np.zeros(3), 1: np.array([1.0, 0, 0]), 2: np.array([4.0, 0, 0])}
    score = marginalization_score(centers, 0, 2, 0.0)
    assert score == pytest.approx(math.sqrt(4.0) * 1.0)


def test_two_newest_keyframes_are_protected(camera):
    positions = [0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 0.0, 3.0]
    window = WindowState(
        camera, [keyframe_at(camera, i, x, with_points=False) for i, x in enumerate(positions)]
    )
    plan = schedule_marginalization(window, max_keyframes=7)
    assert len(plan.frames) == 1
    assert 6 not in plan.frames and 7 not in plan.frames


def test_small_window_is_left_alone(camera):
    window = WindowState(camera, [keyframe_at(camera, 0, 0.0), keyframe_at(camera, 1, 5.0)])
    assert schedule_marginalization(window, max_keyframes=1).frames == []


# ---------------------------------------------------------------------------
# Per-frame state machine
# ---------------------------------------------------------------------------

def test_front_end_starts_by_initializing():
    spec = desk_scene(num_frames=12, path_scale=0.1)
    scene = generate_scene(spec)
    config = RunConfig(num_points=300, selection_mode="uniform", pyramid_levels=3)
    frontend = FrontEnd(scene.camera, config)

    results = []
    for index, image in enumerate(scene.images):
        frame = Frame(index, float(scene.trajectory.timestamps[index]), build_pyramid(image, 3))
        result = frontend.process(frame)
        results.append(result)
        if result.status is FrameStatus.LOST:
            break

    assert results[0].status is FrameStatus.INITIALIZING
    assert not results[0].is_keyframe
    trajectory = frontend.trajectory()
    stamps = [stamp for stamp, _, _ in trajectory]
    assert stamps == sorted(stamps)
    if frontend.initialized:
        assert trajectory[0][2].is_close(Pose.identity(), 1e-12)
        assert frontend.keyframe_count >= 2
        frontend.window.check_consistency()


def test_processing_after_loss_is_rejected(camera):
    config = RunConfig(num_points=50, selection_mode="uniform", pyramid_levels=1)
    frontend = FrontEnd(camera, config)
    frontend.lost = True
    with pytest.raises(PreconditionError):
        frontend.process(Frame(0, 0.0, build_pyramid(smooth_image(), 1)))


def test_exhausted_keyframe_is_marked(camera):
    frames = [keyframe_at(camera, i, 0.02 * i) for i in range(5)]
    frames[1].points = []
    frames[2] = keyframe_at(camera, 2, 0.04, with_points=False)
    window = WindowState(camera, frames)

    plan = schedule_marginalization(window, max_keyframes=7)

    assert plan.frames == [1]
    assert plan.points == []


def test_exhausted_newest_keyframes_stay(camera):
    frames = [keyframe_at(camera, i, 0.02 * i) for i in range(4)]
    frames[2].points = []
    frames[3].points = []
    window = WindowState(camera, frames)
    assert schedule_marginalization(window, max_keyframes=7).frames == []
