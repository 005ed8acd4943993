import sys
from pathlib import Path

import numpy as np
import pytest

# Add the source tree to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from salient_odometry.geometry import CameraIntrinsics  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def camera():
    return CameraIntrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_image(height: int = 120, width: int = 160, seed: int = 0) -> np.ndarray:
    """Sum of low-frequency sinusoids in [30, 230]; smooth enough for finite differences."""
    generator = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.full((height, width), 130.0)
    for _ in range(6):
        fx, fy = generator.uniform(0.02, 0.09, size=2)
        phase = generator.uniform(0, 2 * np.pi)
        image += 16.0 * np.sin(fx * xs + fy * ys + phase)
    return np.clip(image, 30.0, 230.0)
