"""
Pipeline driver.

Frames go through two stages: a preprocessing thread loads each image,
applies photometric calibration, builds the pyramid and filters the saliency
map, and hands the frame to the odometry stage through a bounded queue. Only
the odometry stage touches the front end and writes outputs, so results are
identical to running both stages in sequence.
"""

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .backend import OptimizationFailure
from .config import RunConfig
from .datasets import DatasetSource
from .errors import ConfigurationError
from .evaluation import Trajectory, write_trajectory
from .export import write_point_cloud
from .frontend import FrameStatus, FrontEnd
from .geometry import build_pyramid
from .photometric import apply_photometric_calibration
from .saliency_filter import ClassWeights, filter_saliency
from .window import Frame

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_LOST = "lost"
STATUS_OPTIMIZATION_FAILURE = "optimization_failure"
QUEUE_POLL_SECONDS = 0.1


@dataclass
class RunReport:
    dataset: str
    direction: str
    selection_mode: str
    seed: int
    frames_total: int
    frames_processed: int = 0
    keyframes: int = 0
    active_points: int = 0
    marginalized_points: int = 0
    status: str = STATUS_OK
    failure_cause: Optional[str] = None
    failed_frame: Optional[int] = None
    elapsed_seconds: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == STATUS_OK and self.frames_processed == self.frames_total

    def to_dict(self) -> dict:
        data = asdict(self)
        data["success"] = self.success
        return data


@dataclass(eq=False)
class RunResult:
    trajectory: Trajectory
    point_cloud: List[Tuple[float, float, float, float]] = field(repr=False)
    report: RunReport


class SalientOdometry:
    """
    Runs the full pipeline over one dataset.

    Usage:
        dataset = load_dataset("scenes/loop", "synthetic", config)
        result = SalientOdometry(dataset, config).run()
        write_outputs(result, "output/loop")
    """

    def __init__(self, dataset: DatasetSource, config: RunConfig, class_weights: Optional[ClassWeights] = None):
        if config.selection_mode == "saliency" and not dataset.has_saliency:
            raise ConfigurationError("saliency mode requires a saliency map for every frame")
        self.dataset = dataset
        self.config = config
        self.class_weights = class_weights or ClassWeights.default_indoor(
            default=config.default_class_weight
        )
        self.use_semantics = (
            config.selection_mode == "saliency"
            and config.semantic_filtering
            and not dataset.grayscale_only
            and dataset.has_semantics
        )
        if config.semantic_filtering and dataset.grayscale_only:
            logger.info("Grayscale-only dataset: semantic filtering disabled")
        elif config.selection_mode == "saliency" and config.semantic_filtering and not dataset.has_semantics:
            logger.warning("No segmentation maps found; saliency is used without semantic filtering")
        self.correct = config.photometric_correction and dataset.calibration is not None

    def preprocess(self, position: int) -> Frame:
        entry = self.dataset.frames[position]
        image = self.dataset.load_image(position)
        if self.correct:
            image = apply_photometric_calibration(image, self.dataset.calibration)
        pyramid = build_pyramid(image, self.config.pyramid_levels)
        saliency = None
        if self.config.selection_mode == "saliency":
            saliency = self.dataset.load_saliency(position)
            if self.use_semantics:
                saliency = filter_saliency(saliency, self.dataset.load_semantic(position), self.class_weights)
        return Frame(position, entry.timestamp, pyramid, entry.exposure, saliency)

    def _produce(self, frames: "queue.Queue", stop: threading.Event) -> None:
        def put(item) -> bool:
            while not stop.is_set():
                try:
                    frames.put(item, timeout=QUEUE_POLL_SECONDS)
                    return True
                except queue.Full:
                    continue
            return False

        try:
            for position in range(len(self.dataset)):
                if not put(("frame", self.preprocess(position))):
                    return
        except Exception as e:
            put(("error", e))
            return
        put(("done", None))

    def run(self) -> RunResult:
        report = RunReport(
            dataset=self.dataset.name,
            direction=self.dataset.direction,
            selection_mode=self.config.selection_mode,
            seed=self.config.rng_seed,
            frames_total=len(self.dataset),
        )
        frontend = FrontEnd(self.dataset.camera, self.config)
        frames: "queue.Queue" = queue.Queue(maxsize=self.config.pipeline_queue)
        stop = threading.Event()
        producer = threading.Thread(target=self._produce, args=(frames, stop), name="preprocess", daemon=True)
        start = time.perf_counter()
        producer.start()
        logger.info(
            f"Running {self.dataset.name} ({report.direction}, {report.selection_mode}, seed {report.seed}): "
            f"{report.frames_total} frames"
        )
        try:
            while True:
                kind, payload = frames.get()
                if kind == "done":
                    break
                if kind == "error":
                    raise payload
                frame = payload
                try:
                    result = frontend.process(frame)
                except OptimizationFailure as e:
                    report.status = STATUS_OPTIMIZATION_FAILURE
                    report.failure_cause = f"optimization failure: {e}"
                    report.failed_frame = frame.frame_id
                    break
                if result.status is FrameStatus.LOST:
                    report.status = STATUS_LOST
                    report.failure_cause = "tracking lost after failed recovery"
                    report.failed_frame = frame.frame_id
                    break
                report.frames_processed += 1
        finally:
            stop.set()
            producer.join()

        report.keyframes = frontend.keyframe_count
        report.active_points = frontend.window.active_point_count()
        frontend.flush()
        cloud = frontend.point_cloud()
        report.marginalized_points = len(cloud)
        report.elapsed_seconds = time.perf_counter() - start
        stamped = sorted(((stamp, pose) for stamp, _, pose in frontend.trajectory()), key=lambda item: item[0])
        trajectory = Trajectory.from_pairs(stamped)
        if report.success:
            logger.info(
                f"Run finished: {report.frames_processed} frames, {report.keyframes} keyframes, "
                f"{report.marginalized_points} points in {report.elapsed_seconds:.1f}s"
            )
        else:
            logger.error(
                f"Run failed at frame {report.failed_frame}: {report.failure_cause} "
                f"({report.frames_processed}/{report.frames_total} frames)"
            )
        return RunResult(trajectory, cloud, report)


def run_odometry(
    dataset: DatasetSource, config: RunConfig, class_weights: Optional[ClassWeights] = None
) -> RunResult:
    return SalientOdometry(dataset, config, class_weights).run()


def write_outputs(result: RunResult, out_dir: Union[str, Path]) -> Path:
    """trajectory.txt, pointcloud.ply and report.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(result.trajectory, out / "trajectory.txt")
    write_point_cloud(result.point_cloud, out / "pointcloud.ply")
    (out / "report.json").write_text(json.dumps(result.report.to_dict(), indent=2))
    return out
