"""
Geometric and radiometric value types shared by every LumiProbe stage

Environment maps are equirectangular: longitude spans [-pi, pi) left to right,
latitude [+pi/2, -pi/2] top to bottom, and the map centre looks down the
forward axis (0, 0, -1). All per-pixel arrays are stored row-major as
(height, width, ...) numpy arrays.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError

UNIT_TOLERANCE = 1e-6

Pixel = Tuple[int, int]  # (row, col)
ArrayLike = Union[np.ndarray, Sequence[float], 'Direction']


@dataclass(frozen=True)
class MapSize:
    """Equirectangular map dimensions in pixels"""
    width: int
    height: int

    def __post_init__(self):
        if self.height <= 0 or self.width != 2 * self.height:
            raise DomainError(f"equirectangular maps need width = 2 * height, got {self.width}x{self.height}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Direction:
    """A 3D unit vector"""
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise DomainError(f"direction is not unit length (norm {norm:.9g})")

    @classmethod
    def from_vector(cls, v: ArrayLike) -> 'Direction':
        """Normalise an arbitrary non-zero vector"""
        a = as_vector(v)
        norm = np.linalg.norm(a)
        if norm == 0 or not np.isfinite(norm):
            raise DomainError("cannot normalise a zero or non-finite vector")
        a = a / norm
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def dot(self, other: 'Direction') -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z


@dataclass
class Image:
    """Linear-light image with a per-channel saturation mask"""
    pixels: np.ndarray
    saturation_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[..., None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise DomainError(f"images have 1 or 3 channels, got shape {pixels.shape}")
        self.pixels = pixels
        if self.saturation_mask is None:
            self.saturation_mask = np.zeros(pixels.shape, dtype=bool)
        else:
            mask = np.asarray(self.saturation_mask, dtype=bool)
            if mask.ndim == 2:
                mask = np.repeat(mask[..., None], pixels.shape[2], axis=2)
            if mask.shape != pixels.shape:
                raise DomainError("saturation mask does not match the image shape")
            self.saturation_mask = mask

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def copy(self) -> 'Image':
        return Image(self.pixels.copy(), self.saturation_mask.copy())


@dataclass
class EnvironmentMap:
    """Equirectangular HDR radiance grid with an observed-direction mask"""
    pixels: np.ndarray
    coverage: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DomainError(f"environment maps are RGB, got shape {pixels.shape}")
        MapSize(pixels.shape[1], pixels.shape[0])
        if not np.all(np.isfinite(pixels)):
            raise DomainError("environment map contains non-finite radiance")
        if np.any(pixels < 0):
            raise DomainError("environment map contains negative radiance")
        self.pixels = pixels
        if self.coverage is None:
            self.coverage = np.ones(pixels.shape[:2], dtype=bool)
        else:
            self.coverage = np.asarray(self.coverage, dtype=bool)
            if self.coverage.shape != pixels.shape[:2]:
                raise DomainError("coverage mask does not match the map shape")

    @classmethod
    def zeros(cls, size: MapSize, covered: bool = True) -> 'EnvironmentMap':
        return cls(np.zeros(size.shape + (3,)), np.full(size.shape, covered))

    @property
    def size(self) -> MapSize:
        return MapSize(self.pixels.shape[1], self.pixels.shape[0])

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def coverage_fraction(self) -> float:
        return float(self.coverage.mean())

    def masked(self) -> 'EnvironmentMap':
        """Copy with uncovered directions set to zero radiance"""
        return EnvironmentMap(self.pixels * self.coverage[..., None], self.coverage.copy())

    def scaled(self, factor: float) -> 'EnvironmentMap':
        return EnvironmentMap(self.pixels * factor, self.coverage.copy())


@dataclass
class Material:
    """Per-region specular albedo and roughness plus a diffuse albedo"""
    specular_albedo: np.ndarray
    roughness: np.ndarray
    diffuse_albedo: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        ks = np.atleast_1d(np.asarray(self.specular_albedo, dtype=np.float64))
        if ks.ndim == 1:
            ks = np.repeat(ks[:, None], 3, axis=1)
        alpha = np.atleast_1d(np.asarray(self.roughness, dtype=np.float64))
        rho = np.broadcast_to(np.asarray(self.diffuse_albedo, dtype=np.float64), (3,)).copy()
        if ks.shape[0] == 0 or ks.shape != (alpha.shape[0], 3):
            raise DomainError("material needs a non-empty region table with one k_s and alpha per region")
        if np.any(ks < 0) or np.any(ks > 1):
            raise DomainError("specular albedo must lie in [0, 1]")
        if np.any(alpha <= 0):
            raise DomainError("roughness must be positive")
        if np.any(rho < 0) or np.any(rho > 1):
            raise DomainError("diffuse albedo must lie in [0, 1]")
        self.specular_albedo = ks
        self.roughness = alpha
        self.diffuse_albedo = rho

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Material':
        regions = data.get('regions') or []
        return cls(
            specular_albedo=[np.broadcast_to(np.asarray(r['specular_albedo'], dtype=np.float64), (3,))
                             for r in regions],
            roughness=[r['roughness'] for r in regions],
            diffuse_albedo=data.get('diffuse_albedo', [1.0, 1.0, 1.0]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'diffuse_albedo': self.diffuse_albedo.tolist(),
            'regions': [{'specular_albedo': ks.tolist(), 'roughness': float(a)}
                        for ks, a in zip(self.specular_albedo, self.roughness)],
        }

    @property
    def region_count(self) -> int:
        return self.roughness.shape[0]

    def with_specular(self, specular_albedo: Any, roughness: Any) -> 'Material':
        """Single-region copy with a new lobe, keeping the diffuse albedo"""
        return Material([np.broadcast_to(np.asarray(specular_albedo, dtype=np.float64), (3,))],
                        [roughness], self.diffuse_albedo)


@dataclass
class Probe:
    """Reflective object: per-pixel normals, region ids and scene position"""
    kind: str
    normals: np.ndarray
    regions: np.ndarray
    position: np.ndarray
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("sphere", "normal-map"):
            raise DomainError(f"unknown probe kind {self.kind!r}")
        normals = np.asarray(self.normals, dtype=np.float64)
        if normals.ndim != 3 or normals.shape[2] != 3:
            raise DomainError("probe normals must be an (H, W, 3) array")
        inside = np.all(np.isfinite(normals), axis=2)
        norms = np.linalg.norm(np.where(inside[..., None], normals, 0.0), axis=2)
        inside &= norms > 0.5
        if np.any(np.abs(norms[inside] - 1.0) > UNIT_TOLERANCE):
            raise DomainError("probe normals must be unit length inside the silhouette")
        normals = normals.copy()
        normals[~inside] = np.nan
        self.normals = normals
        regions = np.asarray(self.regions, dtype=np.int64)
        if regions.shape != normals.shape[:2]:
            raise DomainError("region ids must match the normal map shape")
        self.regions = np.where(inside, regions, -1)
        self.position = as_vector(self.position)

    @property
    def silhouette(self) -> np.ndarray:
        return self.regions >= 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.normals.shape[:2]

    def pixel_normals(self) -> np.ndarray:
        """(M, 3) normals of in-silhouette pixels in row-major order"""
        return self.normals[self.silhouette]

    def pixel_regions(self) -> np.ndarray:
        return self.regions[self.silhouette]


def as_vector(v: ArrayLike) -> np.ndarray:
    if isinstance(v, Direction):
        return v.as_array()
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise DomainError(f"expected a 3-vector, got shape {a.shape}")
    return a


def _as_directions(v: ArrayLike) -> np.ndarray:
    if isinstance(v, Direction):
        return v.as_array()
    return np.asarray(v, dtype=np.float64)


def normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def _check_unit(d: np.ndarray):
    norm = np.linalg.norm(d, axis=-1)
    if np.any(~np.isfinite(norm)) or np.any(np.abs(norm - 1.0) > UNIT_TOLERANCE):
        raise DomainError("direction is not unit length")


def lonlat_to_directions(lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.sin(lon), np.sin(lat), -cos_lat * np.cos(lon)], axis=-1)


def directions_to_lonlat(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lon = np.arctan2(d[..., 0], -d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    return lon, lat


def pixel_centers_lonlat(size: MapSize) -> Tuple[np.ndarray, np.ndarray]:
    cols = (np.arange(size.width) + 0.5) / size.width
    rows = (np.arange(size.height) + 0.5) / size.height
    lon = -math.pi + 2.0 * math.pi * cols
    lat = math.pi / 2 - math.pi * rows
    return lon, lat


def direction_grid(size: MapSize) -> np.ndarray:
    """(H, W, 3) unit directions at every pixel centre"""
    lon, lat = pixel_centers_lonlat(size)
    lon_grid, lat_grid = np.meshgrid(lon, lat)
    return lonlat_to_directions(lon_grid, lat_grid)


def solid_angle_weights(size: MapSize) -> np.ndarray:
    """(H, W) solid angle of every pixel; sums to 4*pi up to quadrature error"""
    _, lat = pixel_centers_lonlat(size)
    row = (2.0 * math.pi / size.width) * (math.pi / size.height) * np.cos(lat)
    return np.repeat(row[:, None], size.width, axis=1)


def pixel_to_direction(px: Pixel, size: MapSize) -> Direction:
    row, col = px
    if not (0 <= row < size.height and 0 <= col < size.width):
        raise DomainError(f"pixel {px} outside a {size.width}x{size.height} map")
    lon = -math.pi + 2.0 * math.pi * (col + 0.5) / size.width
    lat = math.pi / 2 - math.pi * (row + 0.5) / size.height
    v = lonlat_to_directions(np.array(lon), np.array(lat))
    return Direction.from_vector(v)


def directions_to_pixels(d: np.ndarray, size: MapSize) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised direction -> (row, col) integer indices"""
    lon, lat = directions_to_lonlat(d)
    col = np.floor((lon + math.pi) / (2.0 * math.pi) * size.width).astype(np.int64) % size.width
    row = np.clip(np.floor((math.pi / 2 - lat) / math.pi * size.height).astype(np.int64), 0, size.height - 1)
    return row, col


def direction_to_pixel(d: ArrayLike, size: MapSize) -> Pixel:
    v = _as_directions(d)
    _check_unit(v)
    row, col = directions_to_pixels(v, size)
    return int(row), int(col)


def reflect(l: ArrayLike, n: ArrayLike) -> Any:
    """Mirror l about n: R = 2(L.N)N - L"""
    if isinstance(l, Direction) and isinstance(n, Direction):
        return Direction.from_vector(reflect(l.as_array(), n.as_array()))
    lv, nv = _as_directions(l), _as_directions(n)
    return 2.0 * np.sum(lv * nv, axis=-1, keepdims=True) * nv - lv


def phong_specular(r: ArrayLike, v: ArrayLike, k_s: Any, alpha: Any) -> Any:
    """k_s * max(R.V, 0)^alpha"""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise DomainError("Phong roughness must be positive")
    cos = np.sum(_as_directions(r) * _as_directions(v), axis=-1)
    value = np.asarray(k_s, dtype=np.float64) * np.power(np.maximum(cos, 0.0), alpha)
    return float(value) if np.ndim(value) == 0 else value


def lobe_solid_angle(alpha: Any) -> Any:
    """Integral of max(cos, 0)^alpha over the sphere"""
    return 2.0 * np.pi / (np.asarray(alpha, dtype=np.float64) + 1.0)


def lobe_cutoff(alpha: Any, level: float = 1e-3) -> Any:
    """Angle where the Phong lobe falls to `level` of its peak"""
    return np.arccos(np.power(level, 1.0 / np.asarray(alpha, dtype=np.float64)))


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] == 1:
        return rgb[..., 0]
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]


def sample_bilinear(pixels: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an equirectangular map at arbitrary directions

    Longitude wraps around; latitude clamps at the poles.
    """
    height, width = pixels.shape[:2]
    lon, lat = directions_to_lonlat(d)
    x = (lon + math.pi) / (2.0 * math.pi) * width - 0.5
    y = np.clip((math.pi / 2 - lat) / math.pi * height - 0.5, 0.0, height - 1.0)
    x0 = np.floor(x)
    y0 = np.minimum(np.floor(y), height - 2) if height > 1 else np.zeros_like(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64) % width
    x1 = (x0 + 1) % width
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bottom = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def image_basis(view: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Right and up axes of an orthographic image looking back along `view`"""
    v = normalize(as_vector(view))
    hint = np.array([0.0, 1.0, 0.0])
    if abs(float(v @ hint)) > 0.999:
        hint = np.array([0.0, 0.0, -1.0])
    right = normalize(np.cross(hint, v))
    up = np.cross(v, right)
    return right, up


def make_sphere_probe(resolution: int, view: ArrayLike = (0.0, 0.0, 1.0),
                      center: ArrayLike = (0.0, 0.0, 0.0), radius: float = 1.0,
                      regions: Optional[np.ndarray] = None) -> Probe:
    """Orthographic image of a sphere: n = (p - center) / radius"""
    if resolution <= 0 or radius <= 0:
        raise DomainError("sphere probes need a positive resolution and radius")
    v = normalize(as_vector(view))
    right, up = image_basis(v)
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u = coords[None, :].repeat(resolution, axis=0)
    w = -coords[:, None].repeat(resolution, axis=1)
    rho2 = u * u + w * w
    inside = rho2 < 1.0
    s = np.sqrt(np.clip(1.0 - rho2, 0.0, 1.0))
    normals = u[..., None] * right + w[..., None] * up + s[..., None] * v
    normals = normalize(normals)
    normals[~inside] = np.nan
    if regions is None:
        regions = np.zeros((resolution, resolution), dtype=np.int64)
    regions = np.where(inside, regions, -1)
    return Probe("sphere", normals, regions, as_vector(center), as_vector(center), float(radius))


def make_normal_map_probe(normals: np.ndarray, regions: Optional[np.ndarray] = None,
                          position: ArrayLike = (0.0, 0.0, 0.0)) -> Probe:
    """Probe from an externally supplied normal map; NaN or zero normals are outside"""
    normals = np.asarray(normals, dtype=np.float64)
    inside = np.all(np.isfinite(normals), axis=2) & (np.linalg.norm(np.nan_to_num(normals), axis=2) > 0.5)
    normals = np.where(inside[..., None], normalize(np.nan_to_num(normals)), np.nan)
    if regions is None:
        regions = np.zeros(normals.shape[:2], dtype=np.int64)
    return Probe("normal-map", normals, np.where(inside, regions, -1), as_vector(position))
