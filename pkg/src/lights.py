"""
Point-light detection on environment maps and triangulation across probes
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter
from scipy.optimize import linear_sum_assignment

from .core import (ArrayLike, Direction, EnvironmentMap, as_vector, direction_grid, luminance, normalize,
                   solid_angle_weights)
from .errors import DegenerateGeometryError, DomainError

logger = logging.getLogger(__name__)

DEGENERATE_EIGENVALUE = 1e-9


@dataclass
class LightEstimate:
    direction: Direction
    color: np.ndarray
    intensity: float
    position: Optional[np.ndarray] = None
    residual: Optional[float] = None

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.intensity <= 0:
            raise DomainError("light intensity must be positive")
        if abs(self.color.sum() - 1.0) > 1e-9:
            raise DomainError("light colour must be a chromaticity summing to 1")

    @property
    def chromaticity(self) -> np.ndarray:
        return self.color[:2]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'direction': self.direction.as_array().tolist(),
            'color': self.color.tolist(),
            'intensity': self.intensity,
        }
        if self.position is not None:
            data['position'] = np.asarray(self.position).tolist()
            data['residual'] = self.residual
        return data


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = as_vector(self.origin)
        d = as_vector(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise DomainError("ray direction must be unit length")
        self.direction = d


@dataclass
class LightMatch:
    """One physical light: the detection it came from on each probe and its 3D fit"""
    members: Dict[int, int]
    position: np.ndarray
    residual: float
    color: np.ndarray
    intensity: float


@dataclass
class MatchResult:
    matches: List[LightMatch] = field(default_factory=list)
    ambiguities: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def resolved(self) -> bool:
        return not self.ambiguities


def detect_lights(env: EnvironmentMap, nms_radius: float = math.radians(10.0),
                  threshold: float = 0.5) -> List[LightEstimate]:
    """Strict local maxima above threshold * max, greedily suppressed within nms_radius

    Each light sits at the intensity-weighted centroid of the covered pixels it
    claims; its intensity is their luminance flux.
    """

    if not env.coverage.any():
        raise DomainError("environment map has no coverage")
    lum = luminance(env.pixels) * env.coverage
    peak = float(lum.max())
    if peak <= 0:
        return []

    # longitude wraps, latitude does not
    modes = ('nearest', 'wrap')
    upper = maximum_filter(lum, size=3, mode=modes)
    lower = minimum_filter(lum, size=3, mode=modes)
    candidates = (lum >= upper) & (lum > lower) & (lum >= threshold * peak) & env.coverage

    dirs = direction_grid(env.size)
    omega = solid_angle_weights(env.size)
    rows, cols = np.nonzero(candidates)
    order = np.argsort(-lum[rows, cols], kind='stable')
    cos_radius = math.cos(nms_radius)

    claimed = np.zeros(lum.shape, dtype=bool)
    lights = []
    for i in order:
        r, c = rows[i], cols[i]
        if claimed[r, c]:
            continue
        near = (dirs @ dirs[r, c] >= cos_radius) & ~claimed & (lum > 0)
        near[r, c] = True
        claimed |= near
        weights = lum[near] * omega[near]
        intensity = float(weights.sum())
        if intensity <= 0:
            continue
        centroid = normalize(weights @ dirs[near])
        rgb = (env.pixels[near] * omega[near][:, None]).sum(axis=0)
        lights.append(LightEstimate(Direction.from_vector(centroid), rgb / rgb.sum(), intensity))

    lights.sort(key=lambda light: light.intensity, reverse=True)
    logger.debug("Detected %d lights from %d candidate maxima", len(lights), len(rows))
    return lights


def triangulate(rays: Sequence[Ray]) -> Tuple[np.ndarray, float]:
    """Least-squares point closest to all rays and its RMS point-to-ray distance"""
    if len(rays) < 2:
        raise DomainError("triangulation needs at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    projectors = []
    for ray in rays:
        P = np.eye(3) - np.outer(ray.direction, ray.direction)
        projectors.append(P)
        A += P
        b += P @ ray.origin
    if np.linalg.eigvalsh(A)[0] < DEGENERATE_EIGENVALUE:
        raise DegenerateGeometryError("rays are (nearly) parallel; the point is undetermined")
    point = np.linalg.solve(A, b)
    distances = [np.linalg.norm(P @ (point - ray.origin)) for P, ray in zip(projectors, rays)]
    residual = float(np.sqrt(np.mean(np.square(distances))))
    return point, residual


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arccos(np.clip(a @ b, -1.0, 1.0)))


def _color_classes(per_probe: Sequence[Sequence[LightEstimate]], tolerance: float) -> List[np.ndarray]:
    centers: List[np.ndarray] = []
    for lights in per_probe:
        for light in lights:
            if not any(np.linalg.norm(light.chromaticity - c) <= tolerance for c in centers):
                centers.append(light.chromaticity)
    return centers


def match_lights(per_probe: Sequence[Sequence[LightEstimate]], positions: Sequence[ArrayLike],
                 color_tolerance: float = 0.05) -> MatchResult:
    """Correspond detections across probes by colour, resolving same-colour groups geometrically

    Same-colour groups are paired between the first two probes that see the
    colour by trying every pairing; with a third such probe the pairing whose
    triangulated points land closest to its detections wins. Without one, the
    candidates are reported as an ambiguity.
    """

    if len(per_probe) < 2:
        raise DomainError("matching needs at least two probes")
    if len(positions) != len(per_probe):
        raise DomainError("one position per probe is required")
    origins = [as_vector(p) for p in positions]
    result = MatchResult()

    for center in _color_classes(per_probe, color_tolerance):
        members = [[i for i, light in enumerate(lights)
                    if np.linalg.norm(light.chromaticity - center) <= color_tolerance]
                   for lights in per_probe]
        seeing = [p for p, m in enumerate(members) if m]
        if len(seeing) < 2:
            logger.debug("colour class %s is seen by fewer than two probes", center)
            continue
        first, second = seeing[:2]
        judge = seeing[2] if len(seeing) > 2 else None

        pairings = _candidate_pairings(members[first], members[second])
        if len(pairings) > 1 and judge is None:
            result.ambiguities.append({
                'color': center.tolist(),
                'probes': [first, second],
                'candidates': [list(p) for p in pairings],
            })
            continue

        best = min(pairings, key=lambda p: _pairing_error(p, first, second, judge, per_probe, origins, members))
        groups = [{first: i0, second: i1} for i0, i1 in best]
        points = [triangulate(_rays(group, per_probe, origins))[0] for group in groups]
        _assign_remaining(groups, points, per_probe, origins, members, seeing[2:])
        for group in groups:
            point, residual = triangulate(_rays(group, per_probe, origins))
            lights = [per_probe[p][i] for p, i in group.items()]
            color = np.mean([light.color for light in lights], axis=0)
            result.matches.append(LightMatch(
                members=group,
                position=point,
                residual=residual,
                color=color / color.sum(),
                intensity=float(np.mean([light.intensity for light in lights])),
            ))

    logger.info("Matched %d lights, %d ambiguous colour groups", len(result.matches), len(result.ambiguities))
    return result


def _candidate_pairings(first: List[int], second: List[int]) -> List[Tuple[Tuple[int, int], ...]]:
    n = min(len(first), len(second))
    if len(first) <= len(second):
        return [tuple(zip(first, perm)) for perm in itertools.permutations(second, n)]
    return [tuple(zip(perm, second)) for perm in itertools.permutations(first, n)]


def _rays(group: Dict[int, int], per_probe: Sequence[Sequence[LightEstimate]],
          origins: List[np.ndarray]) -> List[Ray]:
    return [Ray(origins[p], per_probe[p][i].direction.as_array()) for p, i in group.items()]


def _pairing_error(pairing: Tuple[Tuple[int, int], ...], first: int, second: int, judge: Optional[int],
                   per_probe: Sequence[Sequence[LightEstimate]], origins: List[np.ndarray],
                   members: List[List[int]]) -> float:
    """Total angular error of the pairing's points against the judging probe's nearest detections"""
    if judge is None:
        return 0.0
    detected = [per_probe[judge][j].direction.as_array() for j in members[judge]]
    error = 0.0
    for i0, i1 in pairing:
        try:
            point, _ = triangulate(_rays({first: i0, second: i1}, per_probe, origins))
        except DegenerateGeometryError:
            return math.inf
        predicted = normalize(point - origins[judge])
        error += min(_angle(predicted, d) for d in detected)
    return error


def _assign_remaining(groups: List[Dict[int, int]], points: List[np.ndarray],
                      per_probe: Sequence[Sequence[LightEstimate]], origins: List[np.ndarray],
                      members: List[List[int]], probes: Sequence[int]):
    """Add each further probe's detections to the groups by minimum total angular error"""
    for p in probes:
        cost = np.array([[_angle(normalize(point - origins[p]), per_probe[p][j].direction.as_array())
                          for j in members[p]] for point in points])
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            groups[r][p] = members[p][c]


def lights_to_scene(result: MatchResult, positions: Sequence[ArrayLike],
                    width_deg: float = 3.0) -> List[Dict[str, Any]]:
    """Scene point-light entries for every triangulated match

    The stored intensity reproduces the detected flux as a blob of `width_deg`
    seen from the mean probe distance.
    """
    origins = [as_vector(p) for p in positions]
    sigma = math.radians(width_deg)
    entries = []
    for match in result.matches:
        distance = float(np.mean([np.linalg.norm(match.position - origins[p]) for p in match.members]))
        peak = match.intensity / (2.0 * math.pi * sigma * sigma)
        entries.append({
            'position': match.position.tolist(),
            'intensity': (peak * distance * distance * 3.0 * match.color).tolist(),
            'width_deg': width_deg,
        })
    return entries
