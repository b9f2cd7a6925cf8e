import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gsdiff.camera import look_at  # noqa: E402
from gsdiff.gaussians import GaussianCloud  # noqa: E402


def random_pose(rng, width=32, height=32, radius=(2.5, 4.0)):
    """Camera on a random sphere point looking near the origin."""
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    if abs(d[2]) > 0.95:
        d = np.array([d[0], d[1], 0.5])
        d /= np.linalg.norm(d)
    eye = d * rng.uniform(*radius)
    target = rng.uniform(-0.2, 0.2, 3)
    return look_at(eye, target, fov_deg=rng.uniform(40, 60), width=width, height=height)


def random_cloud(rng, n, spread=0.8, scale=(0.04, 0.3), opacity=(0.05, 0.99)):
    means = rng.uniform(-spread, spread, (n, 3))
    quats = rng.standard_normal((n, 4))
    scales = rng.uniform(*scale, (n, 3))
    opac = rng.uniform(*opacity, n)
    colors = rng.uniform(0, 1, (n, 3))
    return GaussianCloud(means, quats, scales, opac, colors)


@pytest.fixture(scope="session")
def frozen():
    return json.loads((Path(__file__).parent / "data" / "oracle_values.json").read_text())


def degrees_between(a, b):
    c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))
