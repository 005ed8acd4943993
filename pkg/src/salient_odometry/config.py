"""
Run configuration.

Configuration files are flat ``key = value`` text with ``#`` comments. Every
key maps to a field of :class:`RunConfig`; unknown keys are rejected.
Environment variables (optionally from a ``.env`` file) provide default paths
for the command line.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

try:
    from dotenv import load_dotenv
except ImportError:
    print("Warning: python-dotenv not installed. Using environment variables directly.")

    def load_dotenv() -> bool:  # type: ignore[misc]
        return True

from .backend import SolverSettings
from .errors import ConfigurationError
from .point_selection import SELECTION_MODES, SelectionConfig
from .tracker import TrackerSettings

logger = logging.getLogger(__name__)

load_dotenv()

PRESET_DIR = Path(__file__).parent / "presets"
PRESETS = ("tum", "icl", "cvl")
PATTERN_SIZE = 9

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


@dataclass(frozen=True)
class RunConfig:
    # window and selection
    num_keyframes: int = 7
    num_points: int = 2000
    gradient_threshold: float = 7.0
    patch_grid: int = 8
    photometric_correction: bool = True
    block_size: int = 4
    saliency_smoothing: float = 0.05
    decay_pass2: float = 0.75
    decay_pass3: float = 0.5
    selection_mode: str = "saliency"
    semantic_filtering: bool = True
    default_class_weight: float = 1.0
    rng_seed: int = 0
    # error model
    huber_threshold: float = 9.0
    gradient_weight_constant: float = 50.0
    outlier_energy_factor: float = 12.0
    # tracking
    recovery_rotation_deg: float = 3.0
    tracking_iterations: int = 10
    lost_energy_threshold: float = 60.0
    pyramid_levels: int = 4
    # keyframe selection
    kf_weight_flow: float = 1.0
    kf_weight_flow_total: float = 1.0
    kf_weight_brightness: float = 1.0
    kf_threshold: float = 1.0
    kf_flow_fraction: float = 0.04
    bootstrap_threshold_factor: float = 0.5
    bootstrap_seconds: float = 2.0
    # window solver
    solver_iterations: int = 6
    candidate_idepth_min: float = 0.1
    candidate_idepth_max: float = 5.0
    activation_max_pixel_interval: float = 8.0
    marginalization_visible_fraction: float = 0.05
    marginalization_epsilon: float = 0.001
    # initialization
    init_min_flow: float = 3.0
    init_max_frames: int = 30
    # input
    frame_rate: float = 30.0
    pipeline_queue: int = 2

    def __post_init__(self) -> None:
        if self.num_keyframes < 2:
            raise ConfigurationError(f"num_keyframes must be >= 2, got {self.num_keyframes}")
        if self.pyramid_levels < 1:
            raise ConfigurationError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if not 0 < self.candidate_idepth_min < self.candidate_idepth_max:
            raise ConfigurationError("candidate inverse-depth interval must satisfy 0 < min < max")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigurationError(f"selection_mode must be one of {SELECTION_MODES}")
        for name in ("huber_threshold", "gradient_weight_constant", "frame_rate", "kf_flow_fraction"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("kf_weight_flow", "kf_weight_flow_total", "kf_weight_brightness", "default_class_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.pipeline_queue < 1:
            raise ConfigurationError("pipeline_queue must be >= 1")
        self.selection_config()

    # -- derived settings --------------------------------------------------

    @property
    def outlier_threshold(self) -> float:
        """Energy above which a residual pattern counts as an outlier."""
        return self.outlier_energy_factor * PATTERN_SIZE

    def selection_config(self, seed: Optional[int] = None, n_desired: Optional[int] = None) -> SelectionConfig:
        return SelectionConfig(
            n_desired=self.num_points if n_desired is None else n_desired,
            patch_grid=self.patch_grid,
            block_size=self.block_size,
            s_smooth=self.saliency_smoothing,
            gradient_threshold=self.gradient_threshold,
            decay_pass2=self.decay_pass2,
            decay_pass3=self.decay_pass3,
            rng_seed=self.rng_seed if seed is None else seed,
            mode=self.selection_mode,
        )

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(
            huber_threshold=self.huber_threshold,
            gradient_constant=self.gradient_weight_constant,
            out_of_view_energy=self.outlier_threshold,
            max_iterations=self.solver_iterations,
        )

    def tracker_settings(self) -> TrackerSettings:
        return TrackerSettings(
            huber_threshold=self.huber_threshold,
            gradient_constant=self.gradient_weight_constant,
            iterations=self.tracking_iterations,
            lost_energy_threshold=self.lost_energy_threshold,
            out_of_view_energy=self.outlier_threshold,
            recovery_rotation_deg=self.recovery_rotation_deg,
        )

    # -- text format -------------------------------------------------------

    @classmethod
    def parse(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Parse ``key = value`` lines on top of ``base`` (defaults when omitted)."""
        types = {f.name: f.type for f in fields(cls)}
        values: Dict[str, Any] = {}
        for line_number, line in enumerate(text.splitlines(), start=1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            if "=" not in content:
                raise ConfigurationError(f"config line {line_number}: expected 'key = value'")
            key, raw = (part.strip() for part in content.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"config line {line_number}: unknown key '{key}'")
            values[key] = _convert(key, raw, types[key])
        return replace(base or cls(), **values)

    @classmethod
    def from_file(cls, path: Union[str, Path], base: Optional["RunConfig"] = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        logger.info(f"Loading configuration from {path}")
        return cls.parse(path.read_text(), base)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset '{name}', expected one of {PRESETS}")
        return cls.from_file(PRESET_DIR / f"{name}.cfg")

    def serialize(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.serialize())


def _convert(key: str, raw: str, kind: Any) -> Any:
    try:
        if kind in (bool, "bool"):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw}")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigurationError(f"invalid value for '{key}': {e}") from e


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

def _optional_env(key: str, default: str) -> str:
    return os.environ.get(key, default).strip() or default


@dataclass(frozen=True)
class EnvironmentSettings:
    """Default paths, overridable from the environment or a ``.env`` file."""

    config_path: Optional[str]
    output_dir: str
    bench_db: str
    class_weights: Optional[str]

    @classmethod
    def from_env(cls) -> "EnvironmentSettings":
        return cls(
            config_path=_optional_env("SALIENT_CONFIG", "") or None,
            output_dir=_optional_env("SALIENT_OUTPUT_DIR", "output"),
            bench_db=_optional_env("SALIENT_BENCH_DB", "salient_benchmark.db"),
            class_weights=_optional_env("SALIENT_CLASS_WEIGHTS", "") or None,
        )
