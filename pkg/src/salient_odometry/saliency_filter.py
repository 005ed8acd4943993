"""
Saliency filtering with semantic segmentation.

Precomputed saliency maps are first weighted per semantic class, then every
pixel is replaced by the median of the weighted saliency over all pixels of
its class in the whole image.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Set, Union

import cv2
import numpy as np

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

# ADE20K / scene-parsing label ids
WALL_CLASS = 0
FLOOR_CLASS = 3
CEILING_CLASS = 5


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-pixel fixation probability in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InputError(f"saliency map must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0 or not np.all(np.isfinite(values))):
            raise InputError("saliency values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @classmethod
    def uniform(cls, height: int, width: int, value: float = 1.0) -> "SaliencyMap":
        return cls(np.full((height, width), value))


@dataclass(frozen=True, eq=False)
class SemanticMap:
    """Per-pixel class labels."""

    labels: np.ndarray
    class_count: int = 0

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise InputError(f"semantic map must be 2-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise InputError("semantic labels must be non-negative")
        needed = int(labels.max()) + 1 if labels.size else 0
        count = self.class_count or needed
        if count < needed:
            raise InputError(f"label {needed - 1} exceeds class count {count}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_count", count)

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @classmethod
    def single_class(cls, height: int, width: int, label: int = 0) -> "SemanticMap":
        return cls(np.full((height, width), label, dtype=np.int64))


@dataclass
class ClassWeights:
    """Semantic class weights; unlisted classes resolve to ``default``."""

    weights: Dict[int, float] = field(default_factory=dict)
    default: float = 1.0
    _warned: Set[int] = field(default_factory=set, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.default < 0:
            raise ConfigurationError(f"default class weight must be >= 0, got {self.default}")
        for class_id, weight in self.weights.items():
            if weight < 0:
                raise ConfigurationError(f"class {class_id} has negative weight {weight}")

    @classmethod
    def default_indoor(cls, weight: float = 0.1, default: float = 1.0) -> "ClassWeights":
        """Down-weight wall, floor and ceiling; everything else gets ``default``."""
        return cls({WALL_CLASS: weight, FLOOR_CLASS: weight, CEILING_CLASS: weight}, default)

    def weight_for(self, class_id: int) -> float:
        if class_id in self.weights:
            return float(self.weights[class_id])
        if class_id not in self._warned:
            logger.warning(f"Semantic class {class_id} has no weight, using {self.default}")
            self._warned.add(class_id)
        return float(self.default)

    def lookup(self, class_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.weight_for(int(c)) for c in class_ids], dtype=np.float64)


def _check_dimensions(sal: SaliencyMap, sem: SemanticMap) -> None:
    if sal.shape != sem.shape:
        raise InputError(f"saliency {sal.shape} and semantic {sem.shape} dimensions differ")


def weight_saliency(sal: SaliencyMap, sem: SemanticMap, weights: ClassWeights) -> SaliencyMap:
    """Multiply each pixel's saliency by its class weight, clamped to [0, 1]."""
    _check_dimensions(sal, sem)
    classes, inverse = np.unique(sem.labels, return_inverse=True)
    per_pixel = weights.lookup(classes)[inverse.reshape(sem.shape)]
    return SaliencyMap(np.clip(sal.values * per_pixel, 0.0, 1.0))


def class_median_smooth(weighted: SaliencyMap, sem: SemanticMap) -> SaliencyMap:
    """Replace every pixel by the median weighted saliency of its whole class."""
    _check_dimensions(weighted, sem)
    classes, inverse = np.unique(sem.labels, return_inverse=True)
    inverse = inverse.ravel()
    flat = weighted.values.ravel()
    order = np.argsort(inverse, kind="stable")
    boundaries = np.searchsorted(inverse[order], np.arange(1, len(classes)))
    medians = np.array([np.median(group) for group in np.split(flat[order], boundaries)])
    return SaliencyMap(medians[inverse].reshape(sem.shape))


def filter_saliency(sal: SaliencyMap, sem: SemanticMap, weights: ClassWeights) -> SaliencyMap:
    """Semantic weighting followed by per-class median smoothing."""
    return class_median_smooth(weight_saliency(sal, sem, weights), sem)


# ---------------------------------------------------------------------------
# File loaders
# ---------------------------------------------------------------------------

def _read_raw(path: Union[str, Path]) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ConfigurationError(f"cannot read map {path}")
    return raw


def load_saliency_map(path: Union[str, Path]) -> SaliencyMap:
    """Load an 8-bit (or 16-bit) single-channel saliency image as values in [0, 1]."""
    raw = _read_raw(path)
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
    if raw.dtype == np.uint16:
        return SaliencyMap(raw.astype(np.float64) / 65535.0)
    if raw.dtype == np.uint8:
        return SaliencyMap(raw.astype(np.float64) / 255.0)
    return SaliencyMap(np.clip(raw.astype(np.float64), 0.0, 1.0))


def load_semantic_map(path: Union[str, Path], class_count: Optional[int] = None) -> SemanticMap:
    """Load an 8/16-bit label image; raw values are class ids."""
    raw = _read_raw(path)
    if raw.ndim == 3:
        logger.warning(f"Semantic map {path} has {raw.shape[2]} channels, using the first")
        raw = raw[:, :, 0]
    return SemanticMap(raw.astype(np.int64), class_count or 0)


def parse_class_weights(text: str, default: float = 1.0) -> ClassWeights:
    weights: Dict[int, float] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        parts = content.split()
        if len(parts) != 2:
            raise ConfigurationError(f"class weights line {line_number}: expected 'classId weight'")
        try:
            class_id, weight = int(parts[0]), float(parts[1])
        except ValueError as e:
            raise ConfigurationError(f"class weights line {line_number}: {e}") from e
        weights[class_id] = weight
    return ClassWeights(weights, default)


def load_class_weights(path: Union[str, Path], default: float = 1.0) -> ClassWeights:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"class weights file not found: {path}")
    weights = parse_class_weights(path.read_text(), default)
    logger.info(f"Loaded {len(weights.weights)} class weights from {path}")
    return weights
