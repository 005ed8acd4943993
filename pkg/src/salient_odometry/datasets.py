"""
Dataset readers.

Supported layouts:

    tum-mono   images/ or images.zip, times.txt (id timestamp exposure),
               camera.txt, pcalib.txt + vignette.png
    icl-nuim   rgb/ (or the root) with numbered frames; fixed intrinsics,
               no photometric calibration needed
    plain-dir  any directory of images plus a camera.txt; timestamps from
               file order at the configured frame rate
    synthetic  a directory written by ``synthetic.write_scene``

Saliency and segmentation sidecars are matched to frames by file stem.
"""

import logging
import re
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, InputError
from .evaluation import Trajectory, read_trajectory
from .geometry import CameraIntrinsics
from .photometric import PhotometricCalibration, load_photometric_calibration
from .saliency_filter import SaliencyMap, SemanticMap, load_saliency_map, load_semantic_map

logger = logging.getLogger(__name__)

DATASET_FORMATS = ("tum-mono", "icl-nuim", "plain-dir", "synthetic")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif", ".tiff")
ICL_CAMERA = CameraIntrinsics(481.2, 480.0, 319.5, 239.5, 640, 480)


@dataclass(frozen=True)
class FrameEntry:
    index: int
    timestamp: float
    image: str
    exposure: float = 1.0
    saliency: Optional[Path] = None
    semantic: Optional[Path] = None

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass(eq=False)
class DatasetSource:
    name: str
    format: str
    root: Path
    camera: CameraIntrinsics
    frames: List[FrameEntry]
    calibration: Optional[PhotometricCalibration] = None
    ground_truth: Optional[Trajectory] = None
    grayscale_only: bool = False
    direction: str = "forward"
    archive: Optional[Path] = None
    _zip: Optional[zipfile.ZipFile] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if len(self.frames) < 2:
            raise InputError(f"dataset {self.root} has {len(self.frames)} frame(s), need at least 2")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_saliency(self) -> bool:
        return all(f.saliency is not None for f in self.frames)

    @property
    def has_semantics(self) -> bool:
        return all(f.semantic is not None for f in self.frames)

    def reversed(self) -> "DatasetSource":
        """The same frames in backward order (timestamps unchanged)."""
        direction = "backward" if self.direction == "forward" else "forward"
        return replace(self, frames=list(reversed(self.frames)), direction=direction, _zip=None)

    def _read_bytes(self, name: str) -> bytes:
        if self._zip is None:
            self._zip = zipfile.ZipFile(self.archive)
        return self._zip.read(name)

    def load_image(self, position: int) -> np.ndarray:
        """Grayscale intensities in [0, 255] as float64."""
        entry = self.frames[position]
        if self.archive is not None:
            buffer = np.frombuffer(self._read_bytes(entry.image), dtype=np.uint8)
            raw = cv2.imdecode(buffer, cv2.IMREAD_UNCHANGED)
        else:
            raw = cv2.imread(entry.image, cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise InputError(f"cannot read image {entry.image}")
        return to_grayscale(raw)

    def load_saliency(self, position: int) -> Optional[SaliencyMap]:
        entry = self.frames[position]
        if entry.saliency is None:
            return None
        saliency = load_saliency_map(entry.saliency)
        self._check_shape(saliency.shape, entry.saliency)
        return saliency

    def load_semantic(self, position: int) -> Optional[SemanticMap]:
        entry = self.frames[position]
        if entry.semantic is None:
            return None
        semantic = load_semantic_map(entry.semantic)
        self._check_shape(semantic.shape, entry.semantic)
        return semantic

    def _check_shape(self, shape: Tuple[int, ...], path: Path) -> None:
        expected = (self.camera.height, self.camera.width)
        if tuple(shape) != expected:
            raise InputError(f"{path} has shape {tuple(shape)}, frames are {expected}")


def to_grayscale(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint16:
        raw = (raw / 257.0).astype(np.float64)
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = cv2.cvtColor(raw.astype(np.float32), cv2.COLOR_BGRA2GRAY)
    elif raw.ndim == 3:
        raw = cv2.cvtColor(raw.astype(np.float32), cv2.COLOR_BGR2GRAY)
    return np.asarray(raw, dtype=np.float64)


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------

def _natural_key(path: Union[str, Path]) -> Tuple:
    parts = re.split(r"(\d+)", Path(path).name)
    return tuple(int(p) if p.isdigit() else p for p in parts)


def _image_files(directory: Path) -> List[Path]:
    return sorted(
        (p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key
    )


def _sidecar_index(directory: Optional[Path]) -> Dict[str, Path]:
    if directory is None or not directory.is_dir():
        return {}
    return {p.stem: p for p in _image_files(directory)}


def parse_camera_file(path: Path) -> CameraIntrinsics:
    """
    Read a TUM monoVO style ``camera.txt``.

    Line 1 holds ``fx fy cx cy omega`` (optionally prefixed by a model name),
    relative to the image size when fx < 1.5; line 2 holds ``width height``.
    Distortion is ignored with a warning.
    """
    if not path.exists():
        raise ConfigurationError(f"camera calibration not found: {path}")
    lines = [line.split() for line in path.read_text().splitlines() if line.strip()]
    if len(lines) < 2:
        raise ConfigurationError(f"{path}: expected intrinsics and image size lines")
    values = lines[0][1:] if lines[0] and lines[0][0].isalpha() else lines[0]
    try:
        params = [float(v) for v in values]
        width, height = int(lines[1][0]), int(lines[1][1])
    except (ValueError, IndexError) as e:
        raise ConfigurationError(f"{path}: malformed camera calibration: {e}") from e
    if len(params) < 4:
        raise ConfigurationError(f"{path}: need fx fy cx cy")
    fx, fy, cx, cy = params[:4]
    if any(abs(p) > 1e-12 for p in params[4:]):
        logger.warning(f"{path}: distortion parameters {params[4:]} are ignored; images are used as-is")
    if fx < 1.5 and fy < 1.5:
        fx, fy = fx * width, fy * height
        cx, cy = cx * width - 0.5, cy * height - 0.5
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def parse_times_file(path: Path) -> Dict[str, Tuple[float, float]]:
    """``id timestamp [exposure]`` lines -> {id: (timestamp, exposure)}."""
    times = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            exposure = float(parts[2]) if len(parts) > 2 else 1.0
            times[parts[0]] = (float(parts[1]), exposure)
        except (ValueError, IndexError) as e:
            raise InputError(f"{path}: malformed line '{line}': {e}") from e
    return times


def _ground_truth(root: Path, time_scale: float = 1.0) -> Optional[Trajectory]:
    candidates = [root / "groundtruth.txt", *sorted(root.glob("*.freiburg"))]
    for path in candidates:
        if path.exists():
            trajectory = read_trajectory(path)
            if time_scale != 1.0:
                trajectory = Trajectory(trajectory.timestamps * time_scale, trajectory.poses)
            logger.info(f"Loaded {len(trajectory)} ground-truth poses from {path.name}")
            return trajectory
    return None


def _attach_sidecars(
    frames: List[FrameEntry], saliency_dir: Optional[Path], semantic_dir: Optional[Path]
) -> List[FrameEntry]:
    saliency = _sidecar_index(saliency_dir)
    semantic = _sidecar_index(semantic_dir)
    return [replace(f, saliency=saliency.get(f.stem), semantic=semantic.get(f.stem)) for f in frames]


# ---------------------------------------------------------------------------
# Format readers
# ---------------------------------------------------------------------------

def _load_tum(root: Path, config: RunConfig) -> dict:
    camera = parse_camera_file(root / "camera.txt")
    times_path = root / "times.txt"
    times = parse_times_file(times_path) if times_path.exists() else {}
    archive = None
    if (root / "images").is_dir():
        names = [str(p) for p in _image_files(root / "images")]
    elif (root / "images.zip").exists():
        archive = root / "images.zip"
        with zipfile.ZipFile(archive) as z:
            names = sorted((n for n in z.namelist() if Path(n).suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)
    else:
        raise InputError(f"{root}: no images/ directory or images.zip")
    frames = []
    for index, name in enumerate(names):
        stamp, exposure = times.get(Path(name).stem, (index / config.frame_rate, 1.0))
        frames.append(FrameEntry(index, stamp, name, exposure if exposure > 0 else 1.0))

    calibration = None
    pcalib, vignette = root / "pcalib.txt", root / "vignette.png"
    if pcalib.exists() and vignette.exists():
        calibration = load_photometric_calibration(pcalib, vignette)
    elif config.photometric_correction:
        raise ConfigurationError(
            f"{root}: photometric correction is enabled but pcalib.txt / vignette.png are missing"
        )
    return dict(
        camera=camera,
        frames=frames,
        calibration=calibration,
        ground_truth=_ground_truth(root),
        grayscale_only=True,
        archive=archive,
    )


def _load_icl(root: Path, config: RunConfig) -> dict:
    image_dir = root / "rgb" if (root / "rgb").is_dir() else root
    paths = _image_files(image_dir)
    frames = [FrameEntry(i, i / config.frame_rate, str(p)) for i, p in enumerate(paths)]
    camera = parse_camera_file(root / "camera.txt") if (root / "camera.txt").exists() else ICL_CAMERA
    freiburg = any(root.glob("*.freiburg"))
    truth = _ground_truth(root, 1.0 / config.frame_rate if freiburg else 1.0)
    return dict(camera=camera, frames=frames, ground_truth=truth)


def _load_plain(root: Path, config: RunConfig) -> dict:
    image_dir = root / "images" if (root / "images").is_dir() else root
    paths = _image_files(image_dir)
    frames = [FrameEntry(i, i / config.frame_rate, str(p)) for i, p in enumerate(paths)]
    calibration = None
    pcalib, vignette = root / "pcalib.txt", root / "vignette.png"
    if pcalib.exists() and vignette.exists():
        calibration = load_photometric_calibration(pcalib, vignette)
    elif config.photometric_correction:
        raise ConfigurationError(
            f"{root}: photometric correction is enabled but pcalib.txt / vignette.png are missing"
        )
    grayscale = False
    if paths:
        first = cv2.imread(str(paths[0]), cv2.IMREAD_UNCHANGED)
        grayscale = first is not None and first.ndim == 2
    return dict(
        camera=parse_camera_file(root / "camera.txt"),
        frames=frames,
        calibration=calibration,
        ground_truth=_ground_truth(root),
        grayscale_only=grayscale,
    )


def _load_synthetic(root: Path, config: RunConfig) -> dict:
    if not (root / "scene.json").exists():
        raise InputError(f"{root}: not a synthetic scene directory (scene.json missing)")
    times = parse_times_file(root / "times.txt")
    paths = _image_files(root / "images")
    frames = []
    for index, path in enumerate(paths):
        stamp, exposure = times.get(path.stem, (index / config.frame_rate, 1.0))
        frames.append(FrameEntry(index, stamp, str(path), exposure))
    return dict(camera=parse_camera_file(root / "camera.txt"), frames=frames, ground_truth=_ground_truth(root))


_READERS = {
    "tum-mono": _load_tum,
    "icl-nuim": _load_icl,
    "plain-dir": _load_plain,
    "synthetic": _load_synthetic,
}


def load_dataset(
    path: Union[str, Path],
    format: str,
    config: Optional[RunConfig] = None,
    saliency_dir: Optional[Union[str, Path]] = None,
    segmentation_dir: Optional[Union[str, Path]] = None,
) -> DatasetSource:
    """
    Open a dataset directory.

    Sidecar directories default to ``saliency/`` and ``semantic/`` under the
    dataset root when those exist.

    Raises:
        ConfigurationError: unknown format, missing calibration with photometric
            correction enabled, or missing saliency maps in saliency mode
        InputError: missing path, unreadable layout or fewer than 2 frames
    """
    config = config or RunConfig()
    root = Path(path)
    if format not in _READERS:
        raise ConfigurationError(f"unknown dataset format '{format}', expected one of {DATASET_FORMATS}")
    if not root.is_dir():
        raise InputError(f"dataset directory not found: {root}")

    parts = _READERS[format](root, config)
    saliency_path = Path(saliency_dir) if saliency_dir else root / "saliency"
    semantic_path = Path(segmentation_dir) if segmentation_dir else root / "semantic"
    parts["frames"] = _attach_sidecars(parts["frames"], saliency_path, semantic_path)
    dataset = DatasetSource(name=root.name, format=format, root=root, **parts)

    if config.selection_mode == "saliency":
        missing = next((f for f in dataset.frames if f.saliency is None), None)
        if missing is not None:
            raise ConfigurationError(
                f"saliency mode needs a saliency map for every frame; none found for frame "
                f"{missing.index} ('{missing.stem}') in {saliency_path}"
            )
    logger.info(
        f"Loaded {format} dataset {dataset.name}: {len(dataset)} frames, "
        f"{dataset.camera.width}x{dataset.camera.height}"
        + (", grayscale only" if dataset.grayscale_only else "")
    )
    return dataset


def count_frames(path: Union[str, Path], format: str, config: Optional[RunConfig] = None) -> int:
    """Number of frames in a dataset directory, without the two-frame minimum of ``load_dataset``."""
    if format not in _READERS:
        raise ConfigurationError(f"unknown dataset format '{format}', expected one of {DATASET_FORMATS}")
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"dataset directory not found: {root}")
    return len(_READERS[format](root, config or RunConfig())["frames"])
