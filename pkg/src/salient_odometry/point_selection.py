"""
Saliency-driven candidate point selection.

The image is tiled by a K x K grid of patches. Patches are drawn with
probability proportional to their median saliency plus a smoothing term, and
each drawn patch contributes the strongest-gradient pixel of every small block
in three passes of decreasing threshold.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Set, Tuple

import numpy as np

from .errors import ConfigurationError, InputError
from .saliency_filter import SaliencyMap

logger = logging.getLogger(__name__)

SELECTION_MODES = ("saliency", "uniform")
DRAW_BUDGET_FACTOR = 10


@dataclass(frozen=True)
class SelectionConfig:
    n_desired: int = 2000
    patch_grid: int = 8
    block_size: int = 4
    s_smooth: float = 0.05
    gradient_threshold: float = 7.0
    decay_pass2: float = 0.75
    decay_pass3: float = 0.5
    rng_seed: int = 0
    mode: str = "saliency"

    def __post_init__(self) -> None:
        if self.n_desired < 1:
            raise ConfigurationError(f"n_desired must be >= 1, got {self.n_desired}")
        if self.patch_grid < 1:
            raise ConfigurationError(f"patch_grid must be >= 1, got {self.patch_grid}")
        if self.block_size < 1:
            raise ConfigurationError(f"block_size must be >= 1, got {self.block_size}")
        if not self.s_smooth > 0:
            raise ConfigurationError(f"s_smooth must be > 0, got {self.s_smooth}")
        if self.gradient_threshold < 0:
            raise ConfigurationError(f"gradient_threshold must be >= 0, got {self.gradient_threshold}")
        for name in ("decay_pass2", "decay_pass3"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {value}")
        if self.mode not in SELECTION_MODES:
            raise ConfigurationError(f"unknown selection mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """K x K tiling with per-patch sampling weights and gradient thresholds (row-major)."""

    row_edges: np.ndarray
    col_edges: np.ndarray
    sampling_weights: np.ndarray
    gradient_thresholds: np.ndarray

    @property
    def grid_size(self) -> int:
        return len(self.row_edges) - 1

    @property
    def num_patches(self) -> int:
        return len(self.sampling_weights)

    def bounds(self, index: int) -> Tuple[int, int, int, int]:
        """(row0, row1, col0, col1) of patch ``index``, half-open."""
        row, col = divmod(index, self.grid_size)
        return (
            int(self.row_edges[row]),
            int(self.row_edges[row + 1]),
            int(self.col_edges[col]),
            int(self.col_edges[col + 1]),
        )


@dataclass(frozen=True, eq=False)
class SelectionResult:
    points: np.ndarray  # (N, 2) integer (x, y)
    shortfall: bool
    draws: int

    def __len__(self) -> int:
        return len(self.points)


def build_patch_grid(sal: SaliencyMap, gradient_magnitude: np.ndarray, cfg: SelectionConfig) -> PatchGrid:
    """
    Compute per-patch sampling weights and region-adaptive gradient thresholds.

    Args:
        sal: filtered saliency map
        gradient_magnitude: gradient norm at pyramid level 0
        cfg: selection configuration

    Returns:
        PatchGrid with sw_i = median saliency + s_smooth and
        threshold_i = median gradient magnitude + g_th
    """
    gradient_magnitude = np.asarray(gradient_magnitude, dtype=np.float64)
    if sal.shape != gradient_magnitude.shape:
        raise InputError(f"saliency {sal.shape} and gradient {gradient_magnitude.shape} dimensions differ")
    height, width = gradient_magnitude.shape
    k = cfg.patch_grid
    if height < k or width < k:
        raise ConfigurationError(f"image {width}x{height} smaller than a {k}x{k} patch grid")

    row_edges = (np.arange(k + 1) * height) // k
    col_edges = (np.arange(k + 1) * width) // k
    weights = np.empty(k * k)
    thresholds = np.empty(k * k)
    for row in range(k):
        for col in range(k):
            rows = slice(row_edges[row], row_edges[row + 1])
            cols = slice(col_edges[col], col_edges[col + 1])
            weights[row * k + col] = np.median(sal.values[rows, cols]) + cfg.s_smooth
            thresholds[row * k + col] = np.median(gradient_magnitude[rows, cols]) + cfg.gradient_threshold
    return PatchGrid(row_edges, col_edges, weights, thresholds)


def sampling_distribution(grid: PatchGrid) -> np.ndarray:
    """Patch sampling probabilities proportional to the sampling weights."""
    return grid.sampling_weights / grid.sampling_weights.sum()


def draw_patches(probabilities: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` patch indices with replacement."""
    return rng.choice(len(probabilities), size=count, p=probabilities)


def _block_maxima(values: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per block of ``size`` x ``size``: max value and its (row, col), first max in row-major order."""
    rows, cols = values.shape
    nr, nc = rows // size, cols // size
    blocks = values.reshape(nr, size, nc, size).transpose(0, 2, 1, 3).reshape(nr, nc, size * size)
    index = blocks.argmax(axis=2)
    best = np.take_along_axis(blocks, index[..., None], axis=2)[..., 0]
    block_rows = np.arange(nr)[:, None] * size + index // size
    block_cols = np.arange(nc)[None, :] * size + index % size
    return best, block_rows, block_cols


def _any_2x2(mask: np.ndarray) -> np.ndarray:
    nr, nc = mask.shape
    return mask.reshape(nr // 2, 2, nc // 2, 2).any(axis=(1, 3))


def select_in_patch(
    gradient_magnitude: np.ndarray,
    bounds: Tuple[int, int, int, int],
    threshold: float,
    block_size: int,
    decay_pass2: float = 0.75,
    decay_pass3: float = 0.5,
) -> List[Tuple[int, int]]:
    """
    Three-pass gradient selection inside one patch.

    Pass 1 takes the strongest pixel of each d x d block above ``threshold``;
    pass 2 fills empty 2d x 2d blocks at ``threshold * decay_pass2``; pass 3
    fills empty 4d x 4d blocks at ``threshold * decay_pass3``. Blocks are
    anchored at the patch origin; trailing blocks are clipped to the patch.

    Returns:
        (x, y) pixel coordinates, pass 1 first, row-major within a pass
    """
    row0, row1, col0, col1 = bounds
    patch = np.asarray(gradient_magnitude, dtype=np.float64)[row0:row1, col0:col1]
    height, width = patch.shape
    if height == 0 or width == 0:
        return []

    span = 4 * block_size
    padded = np.full((-(-height // span) * span, -(-width // span) * span), -np.inf)
    padded[:height, :width] = patch

    best1, rows1, cols1 = _block_maxima(padded, block_size)
    take1 = best1 > threshold
    occupied2 = _any_2x2(take1)

    best2, rows2, cols2 = _block_maxima(padded, 2 * block_size)
    take2 = ~occupied2 & (best2 > threshold * decay_pass2)
    occupied4 = _any_2x2(occupied2 | take2)

    best3, rows3, cols3 = _block_maxima(padded, span)
    take3 = ~occupied4 & (best3 > threshold * decay_pass3)

    selected: List[Tuple[int, int]] = []
    for take, rows, cols in ((take1, rows1, cols1), (take2, rows2, cols2), (take3, rows3, cols3)):
        for r, c in zip(rows[take], cols[take]):
            selected.append((col0 + int(c), row0 + int(r)))
    return selected


def select_points(
    sal: SaliencyMap,
    gradient_magnitude: np.ndarray,
    cfg: SelectionConfig,
    rng: Optional[np.random.Generator] = None,
) -> SelectionResult:
    """
    Draw patches by saliency and accumulate their three-pass selections.

    Patches are drawn with replacement; a patch already processed in this call
    is skipped and redrawn. Stops once ``cfg.n_desired`` points are collected,
    every patch is processed, or ``10 x |patches|`` draws are spent.
    """
    grid = build_patch_grid(sal, gradient_magnitude, cfg)
    if cfg.mode == "uniform":
        probabilities = np.full(grid.num_patches, 1.0 / grid.num_patches)
    else:
        probabilities = sampling_distribution(grid)
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng

    budget = DRAW_BUDGET_FACTOR * grid.num_patches
    processed: Set[int] = set()
    seen: Set[Tuple[int, int]] = set()
    selected: List[Tuple[int, int]] = []
    draws = 0
    while len(selected) < cfg.n_desired and draws < budget and len(processed) < grid.num_patches:
        patch = int(draw_patches(probabilities, 1, rng)[0])
        draws += 1
        if patch in processed:
            continue
        processed.add(patch)
        for point in select_in_patch(
            gradient_magnitude,
            grid.bounds(patch),
            float(grid.gradient_thresholds[patch]),
            cfg.block_size,
            cfg.decay_pass2,
            cfg.decay_pass3,
        ):
            if point not in seen:
                seen.add(point)
                selected.append(point)

    shortfall = len(selected) < cfg.n_desired
    if shortfall:
        logger.debug(f"Point selection short: {len(selected)}/{cfg.n_desired} after {draws} draws")
    points = np.array(selected, dtype=np.int64).reshape(-1, 2)
    return SelectionResult(points, shortfall, draws)
