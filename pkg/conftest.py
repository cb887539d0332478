"""
Shared fixtures for the LumiProbe test suite
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from src.config import Config
from src.core import MapSize, Material, make_sphere_probe, normalize
from src.envmap import EnvmapEstimator
from src.renderer import render_probe
from src.scene import BlobSpec, blob_environment

VIEW = (0.0, 0.0, 1.0)

# three lights on the visible side of the map, 52-68 degrees apart
THREE_BLOBS = [
    ((0.5, 0.3, 0.8), 5.0),
    ((-0.6, 0.2, 0.75), 3.0),
    ((0.1, -0.45, 0.85), 4.0),
]


def blob_directions():
    return [normalize(np.asarray(d, dtype=np.float64)) for d, _ in THREE_BLOBS]


def three_blob_environment(size: MapSize, width_deg: float = 8.0, ambient: float = 0.0):
    blobs = [BlobSpec(list(d), width_deg, radiance) for d, radiance in THREE_BLOBS]
    return blob_environment(size, blobs, ambient)


def angle_between(a, b) -> float:
    a = normalize(np.asarray(a, dtype=np.float64))
    b = normalize(np.asarray(b, dtype=np.float64))
    return math.degrees(math.acos(float(np.clip(a @ b, -1.0, 1.0))))


@pytest.fixture
def config():
    return Config(max_workers=2)


@pytest.fixture
def small_size():
    return MapSize(64, 32)


@pytest.fixture(scope="session")
def blob_roundtrip():
    """Glossy probe under three blobs, traced and deconvolved at full iteration count"""
    size = MapSize(128, 64)
    env = three_blob_environment(size)
    probe = make_sphere_probe(128)
    material = Material([0.3], [200.0], [0.5, 0.5, 0.5])
    config = Config(rl_tolerance=0.0)
    layers = render_probe(probe, material, env, VIEW, config)
    estimate = EnvmapEstimator(config).estimate(layers.highlight, probe, material, VIEW,
                                                iterations=30, size=size)
    return SimpleNamespace(env=env, probe=probe, material=material, layers=layers,
                           estimate=estimate, config=config)
