"""Point cloud export as ASCII PLY (x y z intensity per vertex)."""

import logging
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InputError

logger = logging.getLogger(__name__)

PLY_PROPERTIES = ("x", "y", "z", "intensity")


def ply_header(count: int) -> str:
    lines = ["ply", "format ascii 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in PLY_PROPERTIES]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def write_point_cloud(points: Sequence[Tuple[float, float, float, float]], path: Union[str, Path]) -> Path:
    """Write points in the given order (marginalization order for run output)."""
    path = Path(path)
    rows = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    body = "".join(f"{x:.6f} {y:.6f} {z:.6f} {i:.6f}\n" for x, y, z, i in rows)
    with open(path, "w") as f:
        f.write(ply_header(len(rows)))
        f.write(body)
    logger.info(f"Wrote {len(rows)} points to {path}")
    return path


def read_point_cloud(path: Union[str, Path]) -> np.ndarray:
    """(N, 4) array of x, y, z, intensity."""
    path = Path(path)
    with open(path) as f:
        header = []
        for line in f:
            header.append(line.strip())
            if line.strip() == "end_header":
                break
    if not header or header[0] != "ply" or header[-1] != "end_header":
        raise InputError(f"{path} is not an ASCII PLY file")
    count = next((int(h.split()[-1]) for h in header if h.startswith("element vertex")), 0)
    if count == 0:
        return np.zeros((0, 4))
    frame = pd.read_csv(path, sep=" ", header=None, skiprows=len(header), nrows=count, names=list(PLY_PROPERTIES))
    return frame.to_numpy(dtype=np.float64)
