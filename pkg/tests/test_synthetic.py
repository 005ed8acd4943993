"""Tests for the synthetic scene renderer and its dataset layout."""

import json

import cv2
import numpy as np
import pytest

from salient_odometry.geometry import Pose
from salient_odometry.saliency_filter import CEILING_CLASS, FLOOR_CLASS, WALL_CLASS
from salient_odometry.synthetic import (
    Box,
    SceneGenerationError,
    SceneSpec,
    cluttered_scene,
    desk_scene,
    generate_scene,
    heading_rotation,
    loop_scene,
    render_view,
    scene_from_name,
    scene_trajectory,
    surface_distance,
    write_scene,
)


def test_heading_zero_is_identity():
    np.testing.assert_allclose(heading_rotation(0.0), np.eye(3), atol=1e-15)


def test_back_wall_depth_is_constant():
    view = render_view(SceneSpec(num_frames=1), Pose.identity())
    np.testing.assert_allclose(view.depth, 2.0, atol=1e-9)
    assert np.all(view.labels == WALL_CLASS)
    assert np.all(view.saliency == 0.0)


def test_looking_up_and_down_hits_ceiling_and_floor():
    spec = SceneSpec(num_frames=1)
    down = render_view(spec, Pose.from_rotvec([-np.pi / 2, 0.0, 0.0]))
    up = render_view(spec, Pose.from_rotvec([np.pi / 2, 0.0, 0.0]))
    center = (spec.height // 2, spec.width // 2)
    labels = {int(down.labels[center]), int(up.labels[center])}
    assert labels == {FLOOR_CLASS, CEILING_CLASS}
    assert down.depth[center] == pytest.approx(1.25, abs=1e-2)


def test_objects_are_salient():
    spec = SceneSpec(num_frames=1, objects=(Box((0.0, 0.0, 1.0), (0.4, 0.4, 0.2)),))
    view = render_view(spec, Pose.identity())
    center = (spec.height // 2, spec.width // 2)
    assert view.saliency[center] == 1.0
    assert view.depth[center] == pytest.approx(0.9, abs=1e-9)
    assert view.labels[center] >= 64
    assert view.saliency[0, 0] == 0.0


def test_stationary_frames_are_identical():
    scene = generate_scene(SceneSpec(trajectory="stationary", num_frames=4))
    for image in scene.images[1:]:
        np.testing.assert_array_equal(image, scene.images[0])


def test_dolly_toward_wall_scales_the_image():
    spec = SceneSpec(trajectory="dolly", num_frames=2, path_scale=1.0, width=161, height=121)
    trajectory = scene_trajectory(spec)
    near = render_view(spec, trajectory.poses[1])
    far = render_view(spec, trajectory.poses[0])
    center_u, center_v = 80, 60
    # 1 m closer to a 2 m wall doubles the magnification around the principal point
    for du, dv in ((10, 0), (0, 10), (-20, 14)):
        assert near.radiance[center_v + dv, center_u + du] == pytest.approx(
            far.radiance[center_v + dv // 2, center_u + du // 2], abs=1e-6
        )


def test_generation_is_deterministic():
    spec = desk_scene(num_frames=3, noise_sigma=2.0)
    first, second = generate_scene(spec), generate_scene(spec)
    for a, b in zip(first.images, second.images):
        np.testing.assert_array_equal(a, b)
    assert first.images[0].dtype == np.uint8


def test_texture_seed_changes_images():
    a = generate_scene(desk_scene(num_frames=1))
    b = generate_scene(desk_scene(num_frames=1, texture_seed=7))
    assert np.any(a.images[0] != b.images[0])


def test_exposure_variation_scales_intensities():
    scene = generate_scene(SceneSpec(trajectory="stationary", num_frames=8, exposure_variation=0.3))
    assert scene.exposures.max() > 1.2
    brightest = int(np.argmax(scene.exposures))
    assert scene.images[brightest].astype(float).mean() > scene.images[0].astype(float).mean()


def test_camera_leaving_the_room_is_rejected():
    with pytest.raises(SceneGenerationError):
        generate_scene(SceneSpec(trajectory="dolly", num_frames=5, path_scale=3.0))


def test_camera_inside_an_object_is_rejected():
    spec = SceneSpec(trajectory="stationary", num_frames=2, objects=(Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5)),))
    with pytest.raises(SceneGenerationError):
        generate_scene(spec)


def test_invalid_specs():
    with pytest.raises(SceneGenerationError):
        SceneSpec(trajectory="spiral")
    with pytest.raises(SceneGenerationError):
        SceneSpec(num_frames=0)
    with pytest.raises(SceneGenerationError):
        SceneSpec(exposure_variation=1.0)


def test_reference_scenes_stay_inside_the_room():
    for factory in (desk_scene, loop_scene, cluttered_scene):
        spec = factory(num_frames=24)
        trajectory = scene_trajectory(spec)
        half = 0.5 * np.asarray(spec.room_size)
        assert np.all(np.abs(trajectory.positions) < half)


def test_loop_closes():
    trajectory = scene_trajectory(loop_scene(num_frames=60))
    assert np.linalg.norm(trajectory.positions[-1] - trajectory.positions[0]) < 1e-9
    assert trajectory.length == pytest.approx(2 * np.pi * 0.637, rel=1e-3)


def test_scene_from_name():
    assert scene_from_name("desk").num_frames == 60
    assert scene_from_name("loop", num_frames=12, seed=5).texture_seed == 5
    with pytest.raises(SceneGenerationError):
        scene_from_name("garden")


def test_surface_distance():
    spec = SceneSpec(num_frames=1, objects=(Box((0.0, 0.0, 1.0), (0.4, 0.4, 0.2)),))
    points = [[0.0, 0.0, 2.0], [0.0, 0.0, 1.5], [0.0, 0.0, 0.9], [1.9, 0.0, -1.0], [0.0, 0.0, 1.0]]
    np.testing.assert_allclose(surface_distance(spec, points), [0.0, 0.4, 0.0, 0.1, 0.1], atol=1e-12)


def test_write_scene_layout(tmp_path):
    scene = generate_scene(desk_scene(num_frames=3))
    root = write_scene(scene, tmp_path / "desk")

    for sub, suffix in (("images", ".png"), ("saliency", ".png"), ("semantic", ".png"), ("depth", ".npy")):
        assert sorted(p.name for p in (root / sub).iterdir()) == [f"{i:05d}{suffix}" for i in range(3)]
    np.testing.assert_array_equal(cv2.imread(str(root / "images" / "00001.png"), cv2.IMREAD_UNCHANGED), scene.images[1])
    np.testing.assert_allclose(np.load(root / "depth" / "00002.npy"), scene.depths[2])

    times = (root / "times.txt").read_text().splitlines()
    assert len(times) == 3
    assert times[1].split()[0] == "00001"
    assert float(times[1].split()[1]) == pytest.approx(1 / 30)

    camera_lines = (root / "camera.txt").read_text().splitlines()
    assert camera_lines[1] == "160 120"
    assert float(camera_lines[0].split()[0]) == pytest.approx(0.75)

    spec = SceneSpec.from_dict(json.loads((root / "scene.json").read_text()))
    assert spec == scene.spec
    assert len((root / "groundtruth.txt").read_text().splitlines()) == 3
