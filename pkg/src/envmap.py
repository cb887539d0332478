"""
Environment map recovery from a highlight layer

Tracing maps probe highlight values onto the directions they mirror, the
Phong kernel models the blur the specular lobe applies to the environment,
and Richardson-Lucy deconvolution undoes it on the covered part of the map.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .config import Config
from .core import (ArrayLike, EnvironmentMap, Image, MapSize, Material, Pixel, Probe, as_vector,
                   direction_grid, directions_to_pixels, lobe_cutoff, lobe_solid_angle, normalize,
                   solid_angle_weights)
from .errors import DomainError
from .renderer import LayerSet, saturation_mask, shading_chromaticity_rgb

logger = logging.getLogger(__name__)

RL_EPSILON = 1e-12


@dataclass
class KernelParamMap:
    """Per env-pixel roughness and specular albedo inherited from the probe region that sees it"""
    alpha: np.ndarray
    specular_albedo: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.specular_albedo = np.asarray(self.specular_albedo, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if not (self.alpha.shape == self.specular_albedo.shape == self.coverage.shape):
            raise DomainError("kernel parameter planes differ in shape")
        MapSize(self.alpha.shape[1], self.alpha.shape[0])
        covered = self.coverage
        if np.any(~(self.alpha[covered] > 0)):
            raise DomainError("roughness must be positive wherever coverage is set")
        ks = self.specular_albedo[covered]
        if np.any(~((ks >= 0) & (ks <= 1))):
            raise DomainError("specular albedo must lie in [0, 1] wherever coverage is set")

    @property
    def size(self) -> MapSize:
        return MapSize(self.alpha.shape[1], self.alpha.shape[0])

    @classmethod
    def uniform(cls, size: MapSize, alpha: float, specular_albedo: float,
                coverage: Optional[np.ndarray] = None) -> 'KernelParamMap':
        coverage = np.ones(size.shape, dtype=bool) if coverage is None else coverage
        return cls(np.where(coverage, alpha, 0.0), np.where(coverage, specular_albedo, 0.0), coverage)


@dataclass
class EnvmapEstimate:
    """Final map plus the intermediate stages of one estimation"""
    final: EnvironmentMap
    forward: EnvironmentMap
    traced: EnvironmentMap
    normalized: EnvironmentMap
    params: KernelParamMap
    recolored: Image
    recolor_fallback: np.ndarray
    iterations: int

    def stages(self) -> Dict[str, EnvironmentMap]:
        return {
            'forward': self.forward,
            'traced': self.traced,
            'normalized': self.normalized,
            'final': self.final,
        }


def _check_aligned(highlight: Image, probe: Probe):
    if highlight.pixels.shape[:2] != probe.shape:
        raise DomainError(f"highlight {highlight.pixels.shape[:2]} and probe {probe.shape} are not aligned")
    if not np.any(probe.silhouette):
        raise DomainError("probe silhouette is empty")


def _highlight_rgb(highlight: Image) -> np.ndarray:
    pixels = highlight.pixels
    return np.repeat(pixels, 3, axis=2) if pixels.shape[2] == 1 else pixels


def trace_forward(highlight: Image, probe: Probe, view: ArrayLike, size: MapSize) -> EnvironmentMap:
    """Splat every probe pixel's highlight onto its mirror direction; collisions are averaged"""
    _check_aligned(highlight, probe)
    v = normalize(as_vector(view))
    normals = probe.pixel_normals()
    values = _highlight_rgb(highlight)[probe.silhouette]
    front = normals @ v > 0
    normals, values = normals[front], values[front]

    mirror = 2.0 * (normals @ v)[:, None] * normals - v
    rows, cols = directions_to_pixels(normalize(mirror), size)
    flat = rows * size.width + cols

    sums = np.zeros((size.height * size.width, 3))
    counts = np.zeros(size.height * size.width)
    np.add.at(sums, flat, values)
    np.add.at(counts, flat, 1.0)
    hit = counts > 0
    sums[hit] /= counts[hit, None]
    return EnvironmentMap(sums.reshape(size.shape + (3,)), hit.reshape(size.shape))


def trace_inverse(highlight: Image, probe: Probe, view: ArrayLike, size: MapSize, k: int = 4,
                  material: Optional[Material] = None,
                  coverage_factor: float = 2.0) -> Tuple[EnvironmentMap, KernelParamMap]:
    """Pull each env pixel's value from the probe normals nearest to the normal that mirrors it"""

    _check_aligned(highlight, probe)
    if k < 1:
        raise DomainError("neighbour count must be >= 1")
    material = material or Config().default_material()
    if probe.pixel_regions().max() >= material.region_count:
        raise DomainError("probe uses more regions than the material defines")

    v = normalize(as_vector(view))
    normals = probe.pixel_normals()
    values = _highlight_rgb(highlight)[probe.silhouette]
    regions = probe.pixel_regions()
    tree = cKDTree(normals)
    k = min(k, len(normals))

    threshold = max(coverage_factor * _mean_spacing(tree, normals), _half_pixel_diagonal(size) / 2.0)

    env_dirs = direction_grid(size).reshape(-1, 3)
    required = env_dirs + v
    norm = np.linalg.norm(required, axis=1)
    reachable = norm > 1e-9
    required[reachable] /= norm[reachable, None]

    chord, idx = tree.query(required, k=k)
    chord = chord.reshape(len(required), k)
    idx = idx.reshape(len(required), k)
    angle = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))

    forward = trace_forward(highlight, probe, v, size)
    covered = reachable & ((angle[:, 0] <= threshold) | forward.coverage.reshape(-1))

    # inverse angular distance weights; an exact match takes all the weight
    exact = angle[:, 0] < 1e-12
    weights = 1.0 / np.maximum(angle, 1e-12)
    weights[exact] = 0.0
    weights[exact, 0] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    interpolated = _local_linear(required, normals[idx], values[idx], weights,
                                 np.einsum('pk,pkc->pc', weights, values[idx]))

    pixels = np.where(covered[:, None], interpolated, 0.0).reshape(size.shape + (3,))
    coverage = covered.reshape(size.shape)

    nearest_region = regions[idx[:, 0]]
    alpha = np.where(covered, material.roughness[nearest_region], 0.0).reshape(size.shape)
    ks = np.where(covered, material.specular_albedo[nearest_region].mean(axis=1), 0.0).reshape(size.shape)

    logger.debug("Inverse warp covers %.1f%% of the map (threshold %.3f deg)",
                 100.0 * coverage.mean(), math.degrees(threshold))
    return EnvironmentMap(pixels, coverage), KernelParamMap(alpha, ks, coverage)


def _local_linear(required: np.ndarray, neighbours: np.ndarray, values: np.ndarray,
                  weights: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Weighted plane fit through the neighbour normals, read off at the required normal

    Coordinates live in the tangent plane of the required normal. Rows whose
    neighbours are too few or nearly collinear keep the fallback estimate, and
    every result stays inside the range of its neighbours.
    """

    if weights.shape[1] < 3:
        return fallback
    helper = np.zeros_like(required)
    helper[:, 2] = 1.0
    helper[np.abs(required[:, 2]) >= 0.9] = (1.0, 0.0, 0.0)
    t1 = np.cross(helper, required)
    t1 /= np.maximum(np.linalg.norm(t1, axis=1, keepdims=True), 1e-12)
    t2 = np.cross(required, t1)

    offsets = neighbours - required[:, None, :]
    u = np.einsum('pkc,pc->pk', offsets, t1)
    w = np.einsum('pkc,pc->pk', offsets, t2)
    scale = np.maximum(np.hypot(u, w).max(axis=1, keepdims=True), 1e-12)
    design = np.stack([np.ones_like(u), u / scale, w / scale], axis=2)

    gram = np.einsum('pk,pki,pkj->pij', weights, design, design)
    rhs = np.einsum('pk,pki,pkc->pic', weights, design, values)
    solvable = np.linalg.det(gram) > 1e-6

    fitted = fallback.copy()
    if solvable.any():
        fitted[solvable] = np.linalg.solve(gram[solvable], rhs[solvable])[:, 0, :]
    return np.clip(fitted, values.min(axis=1), values.max(axis=1))


def _mean_spacing(tree: cKDTree, normals: np.ndarray) -> float:
    if len(normals) < 2:
        return 0.0
    chord, _ = tree.query(normals, k=2)
    return float(np.mean(2.0 * np.arcsin(np.clip(chord[:, 1] / 2.0, 0.0, 1.0))))


def _half_pixel_diagonal(size: MapSize) -> float:
    return 0.5 * math.hypot(2.0 * math.pi / size.width, math.pi / size.height)


def normalize_traced(traced: EnvironmentMap, params: KernelParamMap) -> EnvironmentMap:
    """Divide traced highlight by the lobe integral k_s * 2pi / (alpha + 1) to get radiance"""
    if traced.pixels.shape[:2] != params.alpha.shape:
        raise DomainError("traced map and kernel parameters differ in size")
    usable = traced.coverage & params.coverage & (params.specular_albedo > 0)
    scale = np.zeros(params.alpha.shape)
    scale[usable] = 1.0 / (params.specular_albedo[usable] * lobe_solid_angle(params.alpha[usable]))
    return EnvironmentMap(traced.pixels * scale[..., None], traced.coverage & params.coverage)


def phong_kernel(x: Pixel, params: KernelParamMap, cutoff: Optional[float] = None,
                 normalized: bool = False) -> np.ndarray:
    """(H, W) weights k_s^x * max(L_y.L_x, 0)^alpha_x * dOmega_y within the cutoff angle of x"""
    row, col = x
    size = params.size
    if not (0 <= row < size.height and 0 <= col < size.width):
        raise DomainError(f"pixel {x} outside the map")
    if not params.coverage[row, col]:
        raise DomainError(f"pixel {x} is not covered")
    alpha = params.alpha[row, col]
    ks = params.specular_albedo[row, col]
    cutoff = float(lobe_cutoff(alpha)) if cutoff is None else cutoff

    dirs = direction_grid(size)
    cos = dirs @ dirs[row, col]
    weights = ks * np.power(np.maximum(cos, 0.0), alpha) * solid_angle_weights(size)
    weights[cos < math.cos(cutoff)] = 0.0
    if normalized:
        total = weights.sum()
        weights = weights / total if total > 0 else weights
    return weights


def kernel_matrix(params: KernelParamMap, cutoff_level: float = 1e-3) -> sparse.csr_matrix:
    """Row-normalised blur operator over covered pixels

    Row x holds the normalised Phong kernel of x restricted to covered pixels, so
    the matrix is (n_covered, n_covered) in row-major order of the coverage mask.
    """
    size = params.size
    covered = params.coverage.reshape(-1)
    n = int(covered.sum())
    if n == 0:
        return sparse.csr_matrix((0, 0))

    dirs = direction_grid(size).reshape(-1, 3)[covered]
    omega = solid_angle_weights(size).reshape(-1)[covered]
    alpha = params.alpha.reshape(-1)[covered]
    cutoff = lobe_cutoff(alpha, cutoff_level)
    radius = 2.0 * np.sin(cutoff / 2.0)

    tree = cKDTree(dirs)
    neighbours = tree.query_ball_point(dirs, r=radius)
    counts = np.fromiter((len(nb) for nb in neighbours), dtype=np.int64, count=n)
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbours])

    cos = np.einsum('ij,ij->i', dirs[rows], dirs[cols])
    weights = np.power(np.maximum(cos, 0.0), alpha[rows]) * omega[cols]
    matrix = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    row_sums = np.asarray(matrix.sum(axis=1)).reshape(-1)
    matrix = sparse.diags(1.0 / np.where(row_sums > 0, row_sums, 1.0)) @ matrix
    return matrix.tocsr()


def rl_deconvolve(blurred: EnvironmentMap, params: KernelParamMap, iterations: int = 30,
                  tolerance: float = 1e-4, cutoff_level: float = 1e-3) -> Tuple[EnvironmentMap, int]:
    """Richardson-Lucy on the covered region, per channel

    The adjoint sums are weighted by pixel solid angle, so the covered flux
    sum_y c_y f_y with c_y = sum_x dOmega_x K_xy stays equal to the input's.
    Returns the deconvolved map and the number of iterations run.
    """

    if iterations < 0:
        raise DomainError("iteration count must be non-negative")
    if np.any(blurred.pixels < 0):
        raise DomainError("blurred map must be non-negative")
    if blurred.pixels.shape[:2] != params.alpha.shape:
        raise DomainError("map and kernel parameters differ in size")
    if iterations == 0:
        return EnvironmentMap(blurred.pixels.copy(), blurred.coverage.copy()), 0

    size = params.size
    covered = params.coverage.reshape(-1)
    K = kernel_matrix(params, cutoff_level)
    KT = K.T.tocsr()
    omega = solid_angle_weights(size).reshape(-1)[covered]
    observed = blurred.pixels.reshape(-1, 3)[covered]
    column_weight = KT @ omega
    column_weight = np.where(column_weight > 0, column_weight, 1.0)

    estimate = observed.copy()
    done = 0
    for done in range(1, iterations + 1):
        ratio = observed / (K @ estimate + RL_EPSILON)
        updated = estimate * (KT @ (omega[:, None] * ratio)) / column_weight[:, None]
        change = np.linalg.norm(updated - estimate) / max(np.linalg.norm(estimate), 1e-300)
        estimate = updated
        logger.debug("RL iteration %d relative update %.3g", done, change)
        if change < tolerance:
            break

    pixels = blurred.pixels.reshape(-1, 3).copy()
    pixels[covered] = estimate
    pixels[~covered] = 0.0
    logger.info("Richardson-Lucy ran %d of %d iterations", done, iterations)
    return EnvironmentMap(pixels.reshape(blurred.pixels.shape), params.coverage.copy()), done


def covered_flux(env: EnvironmentMap) -> np.ndarray:
    """Per-channel sum of radiance times solid angle over covered pixels"""
    weights = solid_angle_weights(env.size) * env.coverage
    return np.einsum('hw,hwc->c', weights, env.pixels)


def recolor_highlight(highlight: Image, shading_chromaticity: np.ndarray,
                      mask: Optional[np.ndarray] = None,
                      epsilon: float = 1e-4) -> Tuple[Image, np.ndarray]:
    """Rescale highlight channels to the diffuse shading colour, anchored on one unsaturated channel

    The anchor is blue when unsaturated, else green, else red; pixels with every
    channel saturated anchor on blue. Pixels whose anchor chromaticity is below
    epsilon pass through unchanged and are returned in the fallback mask.
    """

    if highlight.channels != 3:
        raise DomainError("recolouring needs an RGB highlight")
    chroma = shading_chromaticity_rgb(shading_chromaticity)
    if chroma.shape != highlight.pixels.shape:
        raise DomainError("shading chromaticity does not match the highlight image")
    saturated = highlight.saturation_mask if mask is None else np.asarray(mask, dtype=bool)
    if saturated.ndim == 2:
        saturated = np.repeat(saturated[..., None], 3, axis=2)

    anchor = np.full(highlight.pixels.shape[:2], 2, dtype=np.int64)
    anchor[saturated[..., 2] & ~saturated[..., 1]] = 1
    anchor[saturated[..., 2] & saturated[..., 1] & ~saturated[..., 0]] = 0

    pixels = highlight.pixels
    anchor_chroma = np.take_along_axis(chroma, anchor[..., None], axis=2)[..., 0]
    anchor_value = np.take_along_axis(pixels, anchor[..., None], axis=2)[..., 0]

    known = np.all(np.isfinite(chroma), axis=2)
    fallback = known & ~(anchor_chroma >= epsilon)
    apply = known & ~fallback

    out = pixels.copy()
    ratio = chroma[apply] / anchor_chroma[apply][:, None]
    rescaled = anchor_value[apply][:, None] * ratio
    # the anchor channel keeps its value exactly
    rows = np.arange(len(rescaled))
    rescaled[rows, anchor[apply]] = anchor_value[apply]
    out[apply] = rescaled

    if fallback.any():
        logger.warning("%d pixels have no usable anchor chromaticity and were left unchanged",
                       int(fallback.sum()))
    return Image(out, highlight.saturation_mask), fallback


class EnvmapEstimator:
    """Recolour, inverse-trace, normalise and deconvolve a probe's highlight layer"""

    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()

    def saturation(self, img: Image) -> np.ndarray:
        """Channels too close to the clip level to anchor a recolouring"""
        return saturation_mask(img, self.config.clip_level, self.config.saturation_ratio)

    def estimate(self, highlight: Image, probe: Probe, material: Material,
                 view: ArrayLike = (0.0, 0.0, 1.0),
                 shading_chromaticity: Optional[np.ndarray] = None,
                 composite: Optional[Image] = None,
                 iterations: Optional[int] = None, size: Optional[MapSize] = None) -> EnvmapEstimate:
        """Estimate a map from a highlight layer

        Saturation is judged on the composite when one is given, else on the
        highlight layer itself.
        """
        config = self.config
        size = size or config.map_size
        iterations = config.rl_iterations if iterations is None else iterations

        if shading_chromaticity is not None:
            saturated = self.saturation(highlight if composite is None else composite)
            recolored, fallback = recolor_highlight(highlight, shading_chromaticity, saturated,
                                                    config.chroma_epsilon)
        else:
            recolored, fallback = highlight, np.zeros(highlight.pixels.shape[:2], dtype=bool)

        logger.info("Tracing highlight of a %dx%d probe into a %dx%d map",
                    probe.shape[1], probe.shape[0], size.width, size.height)
        forward = trace_forward(recolored, probe, view, size)
        traced, params = trace_inverse(recolored, probe, view, size, config.knn, material,
                                       config.coverage_factor)
        normalized = normalize_traced(traced, params)
        final, done = rl_deconvolve(normalized, params, iterations, config.rl_tolerance,
                                    config.kernel_cutoff_level)
        logger.info("Estimated map covers %.1f%% of directions", 100.0 * final.coverage_fraction())

        return EnvmapEstimate(final=final, forward=forward, traced=traced, normalized=normalized,
                              params=params, recolored=recolored, recolor_fallback=fallback,
                              iterations=done)


def estimate_envmap(source: Union[LayerSet, Image], probe: Probe, material: Optional[Material],
                    view: ArrayLike = (0.0, 0.0, 1.0), config: Optional[Config] = None,
                    recolor: bool = True) -> EnvmapEstimate:
    """Estimate from a rendered LayerSet or a bare highlight image

    Without a material, a LayerSet picks the skin type closest to its mean
    diffuse albedo and a bare image uses the configured default material.
    """
    estimator = EnvmapEstimator(config)
    if isinstance(source, LayerSet):
        if material is None:
            name, material = select_skin_type(mean_albedo(source), estimator.config)
            logger.info("No material given, using skin type %s", name)
        chroma = source.shading_chromaticity if recolor else None
        return estimator.estimate(source.highlight, probe, material, view, chroma, source.composite)
    return estimator.estimate(source, probe, material or estimator.config.default_material(), view)


def mean_albedo(layers: LayerSet, epsilon: float = 1e-4) -> np.ndarray:
    """Per-channel mean of diffuse over shading on silhouette pixels with usable shading"""
    shading = layers.shading.pixels
    usable = layers.silhouette & np.all(shading > epsilon, axis=2)
    if not usable.any():
        raise DomainError("no silhouette pixel has usable diffuse shading")
    return (layers.diffuse.pixels[usable] / shading[usable]).mean(axis=0)


def select_skin_type(mean_albedo: ArrayLike, config: Optional[Config] = None) -> Tuple[str, Material]:
    """Skin type whose diffuse albedo is closest to the observed mean albedo"""
    config = config or Config()
    materials = config.skin_type_materials()
    if not materials:
        raise DomainError("no skin types configured")
    target = as_vector(mean_albedo)
    name = min(materials, key=lambda n: float(np.linalg.norm(materials[n].diffuse_albedo - target)))
    logger.debug("Selected skin type %s for mean albedo %s", name, target)
    return name, materials[name]


def estimate_summary(estimate: EnvmapEstimate) -> Dict[str, Any]:
    return {
        'coverage': estimate.final.coverage_fraction(),
        'iterations': estimate.iterations,
        'recolor_fallback_pixels': int(estimate.recolor_fallback.sum()),
        'flux_normalized': covered_flux(estimate.normalized).tolist(),
        'flux_final': covered_flux(estimate.final).tolist(),
    }
