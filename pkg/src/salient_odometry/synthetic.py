"""
Synthetic indoor scenes with exact ground truth.

A scene is an axis-aligned textured room with textured boxes standing in it.
Frames are rendered by casting one ray per pixel; every surface is Lambertian
and lit by a fixed directional light, so each face has a constant shading
factor times its texture. Alongside each image the renderer produces depth,
a binary saliency map (1 on boxes) and semantic labels using the scene-parsing
ids for wall, floor and ceiling.

World coordinates: x right, y down, z forward; the room is centered on the origin.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.ndimage import map_coordinates

from .errors import SalientOdometryError
from .evaluation import Trajectory, write_trajectory
from .geometry import CameraIntrinsics, Pose
from .saliency_filter import CEILING_CLASS, FLOOR_CLASS, WALL_CLASS

logger = logging.getLogger(__name__)

OBJECT_LABEL_BASE = 64
TRAJECTORY_SHAPES = ("circle", "dolly", "stationary")
CAMERA_CLEARANCE = 0.05
TEXTURE_GRID = 64
# (cell size in meters, amplitude)
TEXTURE_OCTAVES = ((0.40, 0.5), (0.12, 0.3), (0.05, 0.2))
# shading per face normal axis (x, y, z)
FACE_SHADING = (0.85, 1.0, 0.7)


class SceneGenerationError(SalientOdometryError):
    """Raised when a scene cannot be rendered as described."""


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    def contains(self, point: np.ndarray, clearance: float = 0.0) -> bool:
        return bool(np.all(point > self.lower - clearance) and np.all(point < self.upper + clearance))


@dataclass(frozen=True)
class SceneSpec:
    room_size: Tuple[float, float, float] = (4.0, 2.5, 4.0)
    objects: Tuple[Box, ...] = ()
    trajectory: str = "circle"
    num_frames: int = 240
    frame_rate: float = 30.0
    # circle radius, or dolly travel distance
    path_scale: float = 0.637
    camera_height: float = 0.0
    heading: float = 0.0
    width: int = 160
    height: int = 120
    focal: float = 120.0
    texture_seed: int = 0
    surface_contrast: float = 0.8
    object_contrast: float = 1.0
    exposure_variation: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.trajectory not in TRAJECTORY_SHAPES:
            raise SceneGenerationError(f"trajectory must be one of {TRAJECTORY_SHAPES}")
        if self.num_frames < 1:
            raise SceneGenerationError("scene needs at least one frame")
        if min(self.room_size) <= 0:
            raise SceneGenerationError("room dimensions must be positive")
        if not 0 <= self.exposure_variation < 1:
            raise SceneGenerationError("exposure_variation must lie in [0, 1)")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["objects"] = [{"center": list(b.center), "size": list(b.size)} for b in self.objects]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["objects"] = tuple(Box(tuple(o["center"]), tuple(o["size"])) for o in data.get("objects", []))
        data["room_size"] = tuple(data["room_size"])
        return cls(**data)


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    camera: CameraIntrinsics
    trajectory: Trajectory
    images: List[np.ndarray] = field(repr=False)
    depths: List[np.ndarray] = field(repr=False)
    saliency: List[np.ndarray] = field(repr=False)
    labels: List[np.ndarray] = field(repr=False)
    exposures: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.images)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def heading_rotation(yaw: float) -> np.ndarray:
    """Camera looking along (sin yaw, 0, cos yaw) with its y axis pointing down."""
    forward = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    right = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
    down = np.array([0.0, 1.0, 0.0])
    return np.stack([right, down, forward], axis=1)


def scene_trajectory(spec: SceneSpec) -> Trajectory:
    """
    Ground-truth camera path.

    ``circle`` orbits the room center at radius ``path_scale`` looking outward;
    ``dolly`` moves ``path_scale`` meters along the heading with a smooth
    start and stop; ``stationary`` keeps the first pose.
    """
    timestamps = np.arange(spec.num_frames) / spec.frame_rate
    progress = np.arange(spec.num_frames) / max(spec.num_frames - 1, 1)
    poses = []
    for s in progress:
        if spec.trajectory == "circle":
            angle = spec.heading + 2.0 * np.pi * s
            center = np.array(
                [spec.path_scale * np.sin(angle), spec.camera_height, spec.path_scale * np.cos(angle)]
            )
            rotation = heading_rotation(angle)
        elif spec.trajectory == "dolly":
            rotation = heading_rotation(spec.heading)
            travel = spec.path_scale * 0.5 * (1.0 - np.cos(np.pi * s))
            center = np.array([0.0, spec.camera_height, 0.0]) + travel * rotation[:, 2]
        else:
            rotation = heading_rotation(spec.heading)
            center = np.array([0.0, spec.camera_height, 0.0])
        poses.append(Pose(rotation, center))
    return Trajectory(timestamps, poses)


def check_trajectory(spec: SceneSpec, trajectory: Trajectory) -> None:
    half = 0.5 * np.asarray(spec.room_size)
    for stamp, pose in zip(trajectory.timestamps, trajectory.poses):
        c = pose.translation
        if np.any(np.abs(c) >= half - CAMERA_CLEARANCE):
            raise SceneGenerationError(f"camera leaves the room at t={stamp:.3f}s: {c.round(3).tolist()}")
        for box in spec.objects:
            if box.contains(c, CAMERA_CLEARANCE):
                raise SceneGenerationError(f"camera enters an object at t={stamp:.3f}s")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

class TextureBank:
    """Value-noise textures, one per surface, periodic over the lattice."""

    def __init__(self, seed: int):
        self.seed = seed
        self._grids = {}

    def grids(self, surface: int) -> List[np.ndarray]:
        if surface not in self._grids:
            rng = np.random.default_rng([self.seed, surface])
            self._grids[surface] = [rng.random((TEXTURE_GRID, TEXTURE_GRID)) for _ in TEXTURE_OCTAVES]
        return self._grids[surface]

    def sample(self, surface: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Texture in [0, 1] at surface coordinates (meters)."""
        value = np.zeros(len(s))
        for grid, (cell, amplitude) in zip(self.grids(surface), TEXTURE_OCTAVES):
            value += amplitude * map_coordinates(grid, [t / cell, s / cell], order=1, mode="grid-wrap")
        return value


@dataclass(frozen=True, eq=False)
class RenderedView:
    radiance: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    saliency: np.ndarray


def render_view(spec: SceneSpec, pose: Pose, textures: Optional[TextureBank] = None) -> RenderedView:
    """Ray-cast one view. ``radiance`` is unquantized and exposure-free."""
    textures = textures or TextureBank(spec.texture_seed)
    K = spec.camera
    vs, us = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    rays = K.back_project(us.ravel(), vs.ravel())
    directions = rays @ pose.rotation.T
    origin = pose.translation
    half = 0.5 * np.asarray(spec.room_size)

    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(directions > 0, half, -half)
        t_axes = np.where(directions != 0, (bound - origin) / directions, np.inf)
    axis = np.argmin(t_axes, axis=1)
    depth = t_axes[np.arange(len(axis)), axis]
    positive = directions[np.arange(len(axis)), axis] > 0
    surface = 2 * axis + positive.astype(int)
    labels = np.full(len(axis), WALL_CLASS, dtype=np.int32)
    labels[(axis == 1) & positive] = FLOOR_CLASS
    labels[(axis == 1) & ~positive] = CEILING_CLASS
    contrast = np.full(len(axis), spec.surface_contrast)

    for k, box in enumerate(spec.objects):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lower - origin) / directions
            t2 = (box.upper - origin) / directions
        near = np.fmin(t1, t2)
        far = np.fmax(t1, t2)
        t_near = near.max(axis=1)
        t_far = far.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
        if not hit.any():
            continue
        face_axis = np.argmax(near, axis=1)
        depth = np.where(hit, t_near, depth)
        axis = np.where(hit, face_axis, axis)
        facing = directions[np.arange(len(axis)), face_axis] < 0
        surface = np.where(hit, 6 + 6 * k + 2 * face_axis + facing.astype(int), surface)
        labels = np.where(hit, OBJECT_LABEL_BASE + k, labels)
        contrast = np.where(hit, spec.object_contrast, contrast)

    points = origin + depth[:, None] * directions
    radiance = np.zeros(len(depth))
    for sid in np.unique(surface):
        mask = surface == sid
        normal = int(axis[mask][0])
        a, b = [i for i in range(3) if i != normal]
        texture = textures.sample(int(sid), points[mask, a], points[mask, b])
        base = 0.5 + contrast[mask] * (texture - 0.5)
        radiance[mask] = 20.0 + 210.0 * FACE_SHADING[normal] * base

    shape = (spec.height, spec.width)
    saliency = (labels >= OBJECT_LABEL_BASE).astype(np.float64)
    return RenderedView(radiance.reshape(shape), depth.reshape(shape), labels.reshape(shape), saliency.reshape(shape))


def exposure_schedule(spec: SceneSpec) -> np.ndarray:
    """Per-frame exposure factors; a slow sinusoid when ``exposure_variation`` > 0."""
    frames = np.arange(spec.num_frames)
    return 1.0 + spec.exposure_variation * np.sin(2.0 * np.pi * frames / max(spec.num_frames, 1))


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """
    Render every frame of ``spec``.

    Output is a deterministic function of the scene description (noise included).

    Raises:
        SceneGenerationError: if the camera leaves the room or enters an object
    """
    trajectory = scene_trajectory(spec)
    check_trajectory(spec, trajectory)
    textures = TextureBank(spec.texture_seed)
    exposures = exposure_schedule(spec)
    noise_rng = np.random.default_rng([spec.texture_seed, 1])
    images, depths, saliency, labels = [], [], [], []
    for pose, exposure in zip(trajectory.poses, exposures):
        view = render_view(spec, pose, textures)
        image = view.radiance * exposure
        if spec.noise_sigma > 0:
            image = image + noise_rng.normal(0.0, spec.noise_sigma, image.shape)
        images.append(np.clip(np.round(image), 0, 255).astype(np.uint8))
        depths.append(view.depth.astype(np.float32))
        saliency.append(view.saliency)
        labels.append(view.labels)
    logger.info(f"Rendered {spec.num_frames} frames ({spec.trajectory}, {len(spec.objects)} objects)")
    return SyntheticScene(spec, spec.camera, trajectory, images, depths, saliency, labels, exposures)


# ---------------------------------------------------------------------------
# Reference scenes
# ---------------------------------------------------------------------------

def _ring_of_boxes(count: int, radius: float, size: float, seed: int) -> Tuple[Box, ...]:
    rng = np.random.default_rng(seed)
    boxes = []
    for k in range(count):
        angle = 2.0 * np.pi * (k + 0.5) / count + rng.uniform(-0.15, 0.15)
        extent = size * rng.uniform(0.6, 1.2, size=3)
        height = rng.uniform(-0.4, 0.6)
        center = (radius * np.sin(angle), height, radius * np.cos(angle))
        boxes.append(Box(tuple(float(c) for c in center), tuple(float(e) for e in extent)))
    return tuple(boxes)


def desk_scene(num_frames: int = 60, **overrides) -> SceneSpec:
    """Short smooth dolly toward a wall with a few boxes in front of it."""
    objects = (
        Box((-0.6, 0.3, 1.3), (0.4, 0.4, 0.3)),
        Box((0.5, 0.1, 1.5), (0.3, 0.6, 0.3)),
        Box((0.0, 0.6, 1.1), (0.5, 0.2, 0.3)),
    )
    params = dict(objects=objects, trajectory="dolly", num_frames=num_frames, path_scale=0.5, heading=0.0)
    params.update(overrides)
    return SceneSpec(**params)


def loop_scene(num_frames: int = 240, **overrides) -> SceneSpec:
    """A 4 m closed circle with the camera facing the boxes along the walls."""
    params = dict(objects=_ring_of_boxes(8, 1.5, 0.35, seed=3), trajectory="circle", num_frames=num_frames)
    params.update(overrides)
    return SceneSpec(**params)


def cluttered_scene(num_frames: int = 240, **overrides) -> SceneSpec:
    """Many high-contrast boxes against nearly flat room surfaces."""
    params = dict(
        objects=_ring_of_boxes(14, 1.5, 0.3, seed=11),
        trajectory="circle",
        num_frames=num_frames,
        surface_contrast=0.15,
        object_contrast=1.0,
    )
    params.update(overrides)
    return SceneSpec(**params)


REFERENCE_SCENES = {"desk": desk_scene, "loop": loop_scene, "cluttered": cluttered_scene}


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def write_scene(scene: SyntheticScene, directory: Union[str, Path]) -> Path:
    """
    Write a scene as a dataset directory::

        images/00000.png      8-bit grayscale
        saliency/00000.png    8-bit, 255 = 1.0
        semantic/00000.png    8-bit labels
        depth/00000.npy       float32 meters (ground truth only)
        camera.txt            relative pinhole intrinsics
        times.txt             index timestamp exposure
        groundtruth.txt       stamped poses
        scene.json            the generating SceneSpec
    """
    root = Path(directory)
    for sub in ("images", "saliency", "semantic", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for index in range(len(scene)):
        name = f"{index:05d}"
        cv2.imwrite(str(root / "images" / f"{name}.png"), scene.images[index])
        cv2.imwrite(
            str(root / "saliency" / f"{name}.png"), np.round(scene.saliency[index] * 255).astype(np.uint8)
        )
        cv2.imwrite(str(root / "semantic" / f"{name}.png"), scene.labels[index].astype(np.uint8))
        np.save(root / "depth" / f"{name}.npy", scene.depths[index])

    K, w, h = scene.camera, scene.camera.width, scene.camera.height
    (root / "camera.txt").write_text(
        f"{K.fx / w:.9f} {K.fy / h:.9f} {(K.cx + 0.5) / w:.9f} {(K.cy + 0.5) / h:.9f} 0\n"
        f"{w} {h}\nnone\n{w} {h}\n"
    )
    (root / "times.txt").write_text(
        "".join(
            f"{i:05d} {stamp:.9f} {exposure:.9f}\n"
            for i, (stamp, exposure) in enumerate(zip(scene.trajectory.timestamps, scene.exposures))
        )
    )
    write_trajectory(scene.trajectory, root / "groundtruth.txt")
    (root / "scene.json").write_text(json.dumps(scene.spec.to_dict(), indent=2))
    logger.info(f"Wrote synthetic scene to {root}")
    return root


def scene_from_name(name: str, num_frames: Optional[int] = None, seed: Optional[int] = None) -> SceneSpec:
    if name not in REFERENCE_SCENES:
        raise SceneGenerationError(f"unknown scene '{name}', expected one of {sorted(REFERENCE_SCENES)}")
    spec = REFERENCE_SCENES[name]() if num_frames is None else REFERENCE_SCENES[name](num_frames)
    return spec if seed is None else replace(spec, texture_seed=seed)


def surface_distance(spec: SceneSpec, points: Sequence[Sequence[float]]) -> np.ndarray:
    """Distance from each world point to the nearest scene surface (room faces and boxes)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    half = 0.5 * np.asarray(spec.room_size)
    distance = np.min(np.abs(np.abs(points) - half), axis=1)
    for box in spec.objects:
        outside = np.maximum(np.maximum(box.lower - points, points - box.upper), 0.0)
        outside_distance = np.linalg.norm(outside, axis=1)
        inside_distance = np.min(np.minimum(points - box.lower, box.upper - points), axis=1)
        box_distance = np.where(outside_distance > 0, outside_distance, np.abs(inside_distance))
        distance = np.minimum(distance, box_distance)
    return distance
