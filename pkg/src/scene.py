"""
Declarative scene files: environment, probes, view and acceptance thresholds

A scene is JSON with "version": 1. Unknown fields are rejected at every level.
The environment is either a PFM path or a procedural sum of Gaussian blobs and
an ambient term; 3D point lights are projected into each probe's map.
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np

from .config import Config
from .core import (EnvironmentMap, MapSize, Material, Probe, as_vector, direction_grid, make_normal_map_probe,
                   make_sphere_probe, normalize)
from .errors import DomainError, SceneError
from .pfm import read_envmap, read_normals, read_pfm

logger = logging.getLogger(__name__)

SCENE_VERSION = 1
ACCEPTANCE_KEYS = ('max_rmse_diffuse', 'max_rmse_glossy', 'min_coverage', 'max_position_error')

T = TypeVar('T')


def _build(cls: Type[T], data: Any, where: str) -> T:
    if not isinstance(data, dict):
        raise SceneError(f"{where}: expected an object, got {type(data).__name__}")
    try:
        return cls(**data)
    except TypeError as e:
        raise SceneError(f"{where}: {e}") from e


@dataclass
class BlobSpec:
    """Gaussian light blob: peak radiance falling off with angular width sigma"""
    direction: List[float]
    width_deg: float = 8.0
    radiance: Any = 1.0


@dataclass
class PointLightSpec:
    """3D light seen by every probe as a blob of peak intensity / distance^2"""
    position: List[float]
    intensity: Any = 1.0
    width_deg: float = 3.0


@dataclass
class EnvironmentSpec:
    path: Optional[str] = None
    width: int = 128
    height: int = 64
    ambient: Any = 0.0
    blobs: List[BlobSpec] = field(default_factory=list)

    def __post_init__(self):
        self.blobs = [b if isinstance(b, BlobSpec) else _build(BlobSpec, b, "environment.blobs")
                      for b in self.blobs]


@dataclass
class ProbeSpec:
    kind: str = "sphere"
    position: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 1.0
    resolution: int = 64
    material: Optional[Dict[str, Any]] = None
    normal_map: Optional[str] = None
    regions: Optional[str] = None


@dataclass
class SceneDescription:
    version: int
    probes: List[ProbeSpec]
    environment: EnvironmentSpec = field(default_factory=EnvironmentSpec)
    point_lights: List[PointLightSpec] = field(default_factory=list)
    view: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])
    clip_level: float = 1.0
    acceptance: Dict[str, float] = field(default_factory=dict)
    base_dir: Optional[str] = None

    def __post_init__(self):
        if self.version != SCENE_VERSION:
            raise SceneError(f"unsupported scene version {self.version!r}")
        self.probes = [p if isinstance(p, ProbeSpec) else _build(ProbeSpec, p, "probes")
                       for p in self.probes]
        if not self.probes:
            raise SceneError("a scene needs at least one probe")
        if not isinstance(self.environment, EnvironmentSpec):
            self.environment = _build(EnvironmentSpec, self.environment, "environment")
        self.point_lights = [p if isinstance(p, PointLightSpec) else _build(PointLightSpec, p, "point_lights")
                             for p in self.point_lights]
        unknown = set(self.acceptance) - set(ACCEPTANCE_KEYS)
        if unknown:
            raise SceneError(f"unknown acceptance thresholds: {sorted(unknown)}")
        for probe in self.probes:
            if probe.kind not in ("sphere", "normal-map"):
                raise SceneError(f"unknown probe kind {probe.kind!r}")
            if probe.resolution <= 0 or probe.radius <= 0:
                raise SceneError("probe resolution and radius must be positive")
            if probe.kind == "normal-map" and not probe.normal_map:
                raise SceneError("normal-map probes need a normal_map path")
        if self.clip_level <= 0:
            raise SceneError("clip level must be positive")
        try:
            MapSize(self.environment.width, self.environment.height)
        except DomainError as e:
            raise SceneError(str(e)) from e

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[str] = None) -> 'SceneDescription':
        if 'base_dir' in data:
            raise SceneError("base_dir is not a scene field")
        scene = _build(cls, data, "scene")
        scene.base_dir = base_dir
        return scene

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('base_dir')
        return data

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        if path.is_absolute() or self.base_dir is None:
            return path
        return Path(self.base_dir) / path

    @property
    def map_size(self) -> MapSize:
        return MapSize(self.environment.width, self.environment.height)


def load_scene(path: Union[str, Path]) -> SceneDescription:
    path = Path(path)
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}: invalid JSON ({e})") from e
    scene = SceneDescription.from_dict(data, str(path.parent))
    logger.debug("Loaded scene %s with %d probes", path, len(scene.probes))
    return scene


def _rgb(value: Any) -> np.ndarray:
    rgb = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()
    if np.any(rgb < 0) or not np.all(np.isfinite(rgb)):
        raise SceneError(f"radiance must be finite and non-negative, got {value!r}")
    return rgb


def _add_blob(pixels: np.ndarray, dirs: np.ndarray, direction: np.ndarray, width_deg: float,
              radiance: np.ndarray):
    if width_deg <= 0:
        raise SceneError("blob width must be positive")
    sigma = math.radians(width_deg)
    angle = np.arccos(np.clip(dirs @ direction, -1.0, 1.0))
    pixels += np.exp(-0.5 * (angle / sigma) ** 2)[..., None] * radiance


def blob_environment(size: MapSize, blobs: List[BlobSpec], ambient: Any = 0.0) -> EnvironmentMap:
    dirs = direction_grid(size)
    pixels = np.broadcast_to(_rgb(ambient), size.shape + (3,)).copy()
    for blob in blobs:
        _add_blob(pixels, dirs, normalize(as_vector(blob.direction)), blob.width_deg, _rgb(blob.radiance))
    return EnvironmentMap(pixels)


def build_environment(scene: SceneDescription) -> EnvironmentMap:
    """The scene's shared environment, before any point lights"""
    spec = scene.environment
    if spec.path:
        env = read_envmap(scene.resolve(spec.path))
        if env.size != scene.map_size:
            raise SceneError(f"{spec.path} is {env.width}x{env.height}, scene says {spec.width}x{spec.height}")
        return env
    return blob_environment(scene.map_size, spec.blobs, spec.ambient)


def environment_for_probe(scene: SceneDescription, probe: ProbeSpec,
                          base: Optional[EnvironmentMap] = None) -> EnvironmentMap:
    """Shared environment plus the point lights as seen from this probe's position"""
    env = base if base is not None else build_environment(scene)
    if not scene.point_lights:
        return env
    dirs = direction_grid(env.size)
    pixels = env.pixels.copy()
    origin = as_vector(probe.position)
    for light in scene.point_lights:
        offset = as_vector(light.position) - origin
        distance = float(np.linalg.norm(offset))
        if distance <= 0:
            raise SceneError("a point light sits at a probe position")
        _add_blob(pixels, dirs, offset / distance, light.width_deg, _rgb(light.intensity) / distance ** 2)
    return EnvironmentMap(pixels, env.coverage)


def build_probe(scene: SceneDescription, spec: ProbeSpec,
                config: Optional[Config] = None) -> Tuple[Probe, Material]:
    config = config or Config()
    material = Material.from_dict(spec.material) if spec.material else config.default_material()
    if spec.kind == "sphere":
        probe = make_sphere_probe(spec.resolution, scene.view, spec.position, spec.radius)
    else:
        normals = read_normals(scene.resolve(spec.normal_map))
        regions = None
        if spec.regions:
            regions = np.rint(read_pfm(scene.resolve(spec.regions))[..., 0]).astype(np.int64)
        probe = make_normal_map_probe(normals, regions, spec.position)
    return probe, material
