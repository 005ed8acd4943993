"""Tests for dataset readers."""

import zipfile

import cv2
import numpy as np
import pytest

from salient_odometry.config import RunConfig
from salient_odometry.datasets import count_frames, load_dataset, parse_camera_file, to_grayscale
from salient_odometry.errors import ConfigurationError, InputError
from salient_odometry.synthetic import desk_scene, generate_scene, write_scene

UNIFORM = RunConfig(selection_mode="uniform", photometric_correction=False)


def write_images(directory, count, height=48, width=64, color=False):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(count):
        shape = (height, width, 3) if color else (height, width)
        cv2.imwrite(str(directory / f"{i:05d}.png"), rng.integers(0, 256, size=shape, dtype=np.uint8))


def write_tum(root, count=3, exposures=True):
    write_images(root / "images", count)
    (root / "camera.txt").write_text("0.5 0.6 0.5 0.5 0\n64 48\ncrop\n64 48\n")
    lines = [f"{i:05d} {10.0 + 0.05 * i:.6f} {20.0 if exposures else 0.0:.3f}" for i in range(count)]
    (root / "times.txt").write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes") / "desk"
    write_scene(generate_scene(desk_scene(num_frames=4)), root)
    return root


def test_camera_file_relative_values(tmp_path):
    path = tmp_path / "camera.txt"
    path.write_text("Pinhole 0.5 0.6 0.5 0.5 0\n640 480\ncrop\n640 480\n")
    camera = parse_camera_file(path)
    assert (camera.fx, camera.fy) == pytest.approx((320.0, 288.0))
    assert (camera.cx, camera.cy) == pytest.approx((319.5, 239.5))
    assert (camera.width, camera.height) == (640, 480)


def test_camera_file_absolute_values_and_distortion_warning(tmp_path, caplog):
    path = tmp_path / "camera.txt"
    path.write_text("300 310 160 120 0.9\n320 240\n")
    camera = parse_camera_file(path)
    assert (camera.fx, camera.fy, camera.cx, camera.cy) == (300.0, 310.0, 160.0, 120.0)
    assert "ignored" in caplog.text


def test_camera_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        parse_camera_file(tmp_path / "missing.txt")
    bad = tmp_path / "bad.txt"
    bad.write_text("0.5 0.5\n")
    with pytest.raises(ConfigurationError):
        parse_camera_file(bad)


def test_tum_layout(tmp_path):
    root = tmp_path / "sequence_01"
    write_tum(root)
    dataset = load_dataset(root, "tum-mono", UNIFORM)

    assert len(dataset) == 3
    assert dataset.grayscale_only
    assert dataset.calibration is None
    assert [f.timestamp for f in dataset.frames] == pytest.approx([10.0, 10.05, 10.1])
    assert all(f.exposure == 20.0 for f in dataset.frames)
    image = dataset.load_image(1)
    assert image.shape == (48, 64)
    assert image.dtype == np.float64


def test_tum_nonpositive_exposure_defaults_to_one(tmp_path):
    root = tmp_path / "seq"
    write_tum(root, exposures=False)
    dataset = load_dataset(root, "tum-mono", UNIFORM)
    assert all(f.exposure == 1.0 for f in dataset.frames)


def test_tum_zip_archive(tmp_path):
    root = tmp_path / "zipped"
    write_tum(root)
    with zipfile.ZipFile(root / "images.zip", "w") as z:
        for path in sorted((root / "images").iterdir()):
            z.write(path, path.name)
    for path in (root / "images").iterdir():
        path.unlink()
    (root / "images").rmdir()

    dataset = load_dataset(root, "tum-mono", UNIFORM)
    assert dataset.archive is not None
    assert dataset.load_image(2).shape == (48, 64)


def test_tum_requires_calibration_for_correction(tmp_path):
    root = tmp_path / "seq"
    write_tum(root)
    with pytest.raises(ConfigurationError):
        load_dataset(root, "tum-mono", RunConfig(selection_mode="uniform", photometric_correction=True))


def test_single_image_is_rejected(tmp_path):
    root = tmp_path / "seq"
    write_tum(root, count=1)
    with pytest.raises(InputError):
        load_dataset(root, "tum-mono", UNIFORM)
    assert count_frames(root, "tum-mono", UNIFORM) == 1


def test_unknown_format_and_missing_directory(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path, "kitti", UNIFORM)
    with pytest.raises(InputError):
        load_dataset(tmp_path / "nowhere", "tum-mono", UNIFORM)


def test_plain_directory_uses_frame_rate(tmp_path):
    root = tmp_path / "plain"
    write_images(root / "images", 3, color=True)
    (root / "camera.txt").write_text("50 50 31.5 23.5 0\n64 48\n")
    config = RunConfig(selection_mode="uniform", photometric_correction=False, frame_rate=10.0)
    dataset = load_dataset(root, "plain-dir", config)

    assert [f.timestamp for f in dataset.frames] == pytest.approx([0.0, 0.1, 0.2])
    assert not dataset.grayscale_only
    assert dataset.load_image(0).shape == (48, 64)


def test_icl_layout_uses_default_intrinsics(tmp_path):
    root = tmp_path / "living_room"
    write_images(root / "rgb", 2, height=480, width=640, color=True)
    dataset = load_dataset(root, "icl-nuim", UNIFORM)
    assert dataset.camera.fx == pytest.approx(481.2)
    assert dataset.calibration is None


def test_synthetic_round_trip(synthetic_root):
    dataset = load_dataset(synthetic_root, "synthetic", RunConfig(photometric_correction=False))

    assert len(dataset) == 4
    assert dataset.has_saliency and dataset.has_semantics
    assert dataset.camera.fx == pytest.approx(120.0)
    assert dataset.camera.cx == pytest.approx(79.5)
    assert dataset.ground_truth is not None and len(dataset.ground_truth) == 4
    saliency = dataset.load_saliency(0)
    assert saliency.shape == (120, 160)
    assert set(np.unique(saliency.values)) <= {0.0, 1.0}
    assert dataset.load_semantic(0).shape == (120, 160)


def test_saliency_mode_needs_every_map(synthetic_root, tmp_path):
    saliency_dir = tmp_path / "partial"
    saliency_dir.mkdir()
    cv2.imwrite(str(saliency_dir / "00000.png"), np.zeros((120, 160), dtype=np.uint8))
    with pytest.raises(ConfigurationError):
        load_dataset(synthetic_root, "synthetic", RunConfig(), saliency_dir=saliency_dir)


def test_sidecar_shape_mismatch(synthetic_root, tmp_path):
    saliency_dir = tmp_path / "small"
    saliency_dir.mkdir()
    for i in range(4):
        cv2.imwrite(str(saliency_dir / f"{i:05d}.png"), np.zeros((10, 10), dtype=np.uint8))
    dataset = load_dataset(synthetic_root, "synthetic", RunConfig(), saliency_dir=saliency_dir)
    with pytest.raises(InputError):
        dataset.load_saliency(0)


def test_reversed_keeps_timestamps(synthetic_root):
    dataset = load_dataset(synthetic_root, "synthetic", UNIFORM)
    backward = dataset.reversed()

    assert backward.direction == "backward"
    assert [f.index for f in backward.frames] == [3, 2, 1, 0]
    assert [f.timestamp for f in backward.frames] == [f.timestamp for f in reversed(dataset.frames)]
    np.testing.assert_array_equal(backward.load_image(0), dataset.load_image(3))
    assert backward.reversed().direction == "forward"


def test_grayscale_conversion():
    gray = to_grayscale(np.full((4, 4), 200, dtype=np.uint8))
    assert gray.dtype == np.float64 and np.all(gray == 200.0)
    deep = to_grayscale(np.full((4, 4), 65535, dtype=np.uint16))
    np.testing.assert_allclose(deep, 255.0)
    color = to_grayscale(np.full((4, 4, 3), 90, dtype=np.uint8))
    np.testing.assert_allclose(color, 90.0, atol=1e-3)


def test_tum_photometric_calibration(tmp_path):
    root = tmp_path / "calibrated"
    write_tum(root)
    response = 255.0 * (np.arange(256) / 255.0) ** 1.2
    (root / "pcalib.txt").write_text(" ".join(f"{r:.9f}" for r in response) + "\n")
    ramp = np.linspace(30000, 65535, 64)
    cv2.imwrite(str(root / "vignette.png"), np.tile(ramp, (48, 1)).astype(np.uint16))

    dataset = load_dataset(root, "tum-mono", RunConfig(selection_mode="uniform"))

    assert dataset.calibration is not None
    np.testing.assert_allclose(dataset.calibration.inverse_response, response, atol=1e-9)
    assert dataset.calibration.vignette.shape == (48, 64)
    assert dataset.calibration.vignette.max() == 1.0
    assert dataset.calibration.vignette[0, 0] == pytest.approx(30000 / 65535)
