"""
Forward model: render a probe's diffuse and highlight layers under an environment map
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import Config
from .core import (ArrayLike, EnvironmentMap, Image, Material, Probe, as_vector, direction_grid,
                   image_basis, normalize, sample_bilinear, solid_angle_weights)
from .errors import DomainError

logger = logging.getLogger(__name__)

# Lobe quadrature stops where the Phong lobe falls below this fraction of its peak
RENDER_LOBE_LEVEL = 1e-4
MAX_CHUNK_ELEMENTS = 2_000_000


@dataclass
class LayerSet:
    """Composite, diffuse and highlight layers of one probe view"""
    composite: Image
    diffuse: Image
    highlight: Image
    shading: Image
    shading_chromaticity: np.ndarray
    normals: np.ndarray

    @property
    def silhouette(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=2)

    def clipped(self, clip_level: float) -> 'LayerSet':
        """Copy whose composite is clipped to LDR; the other layers are rescaled to match"""
        return LayerSet(
            composite=clip_to_ldr(self.composite, clip_level),
            diffuse=Image(self.diffuse.pixels / clip_level),
            highlight=Image(self.highlight.pixels / clip_level),
            shading=Image(self.shading.pixels / clip_level),
            shading_chromaticity=self.shading_chromaticity,
            normals=self.normals,
        )


class ProbeRenderer:
    """Render probes with a Lambertian diffuse term and the Phong specular lobe"""

    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()
        self.chunk_size = max(1, self.config.render_chunk_size)
        self.max_workers = self.config.max_workers
        self.quadrature = self.config.highlight_quadrature

    def render_probe(self, probe: Probe, material: Material, env: EnvironmentMap,
                     view: ArrayLike = (0.0, 0.0, 1.0)) -> LayerSet:
        """Render every in-silhouette pixel of `probe` seen from direction `view`"""

        if probe.normals is None or not np.any(probe.silhouette):
            raise DomainError("probe has no normals inside its silhouette")
        regions = probe.pixel_regions()
        if regions.max() >= material.region_count:
            raise DomainError(f"probe uses region {regions.max()} but the material has "
                              f"{material.region_count} regions")

        v = normalize(as_vector(view))
        normals = probe.pixel_normals()
        env_dirs = direction_grid(env.size).reshape(-1, 3)
        env_flux = (env.pixels * solid_angle_weights(env.size)[..., None]).reshape(-1, 3)

        ks = material.specular_albedo[regions]
        alpha = material.roughness[regions]
        render_highlight = bool(np.any(ks > 0)) and bool(np.any(env.pixels > 0))
        lobe_samples = self._lobe_samples(v, material) if render_highlight and self.quadrature == "lobe" else {}

        # bound the (pixels x env directions) working set of one chunk
        chunk_size = max(1, min(self.chunk_size, MAX_CHUNK_ELEMENTS // len(env_dirs)))
        chunks = [slice(start, min(start + chunk_size, len(normals)))
                  for start in range(0, len(normals), chunk_size)]

        def render_chunk(chunk: slice) -> Tuple[np.ndarray, np.ndarray]:
            n = normals[chunk]
            cos = n @ env_dirs.T
            shading = np.maximum(cos, 0.0) @ env_flux / math.pi
            highlight = np.zeros_like(shading)
            if render_highlight:
                if self.quadrature == "lobe":
                    highlight = self._highlight_lobe(n, regions[chunk], ks[chunk], env.pixels, lobe_samples)
                else:
                    highlight = self._highlight_pixels(n, cos, v, env_dirs, env_flux, ks[chunk], alpha[chunk])
            return shading, highlight

        logger.debug("Rendering %d probe pixels in %d chunks (%s quadrature)",
                     len(normals), len(chunks), self.quadrature)
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            results = list(executor.map(render_chunk, chunks))

        shading = np.concatenate([r[0] for r in results], axis=0)
        highlight = np.concatenate([r[1] for r in results], axis=0)
        diffuse = shading * material.diffuse_albedo

        return self._assemble(probe, shading, diffuse, highlight)

    def _lobe_samples(self, v: np.ndarray, material: Material) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        """Per-region polar quadrature of the reflected direction around V"""
        t1, t2 = image_basis(v)
        n_theta = self.config.quadrature_theta
        n_phi = self.config.quadrature_phi
        samples = {}
        for region, alpha in enumerate(material.roughness):
            cutoff = min(math.acos(RENDER_LOBE_LEVEL ** (1.0 / alpha)), math.pi / 2)
            d_theta = cutoff / n_theta
            d_phi = 2.0 * math.pi / n_phi
            theta = (np.arange(n_theta) + 0.5) * d_theta
            phi = (np.arange(n_phi) + 0.5) * d_phi
            theta, phi = np.meshgrid(theta, phi, indexing='ij')
            sin_t = np.sin(theta)
            directions = (np.cos(theta)[..., None] * v
                          + (sin_t * np.cos(phi))[..., None] * t1
                          + (sin_t * np.sin(phi))[..., None] * t2).reshape(-1, 3)
            weights = (np.cos(theta) ** alpha * sin_t * d_theta * d_phi).reshape(-1)
            samples[region] = (directions, weights)
        return samples

    def _highlight_lobe(self, normals: np.ndarray, regions: np.ndarray, ks: np.ndarray,
                        env_pixels: np.ndarray, samples: Dict[int, Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        highlight = np.zeros((len(normals), 3))
        for region in np.unique(regions):
            rows = regions == region
            directions, weights = samples[int(region)]
            n = normals[rows]
            # incident direction that reflects into each R sample
            r_dot_n = n @ directions.T
            incident = 2.0 * r_dot_n[..., None] * n[:, None, :] - directions[None, :, :]
            radiance = sample_bilinear(env_pixels, incident)
            highlight[rows] = ks[rows] * np.einsum('s,msc->mc', weights, radiance)
        return highlight

    @staticmethod
    def _highlight_pixels(normals: np.ndarray, cos: np.ndarray, v: np.ndarray, env_dirs: np.ndarray,
                          env_flux: np.ndarray, ks: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        # R.V with R = 2(w.N)N - w
        r_dot_v = 2.0 * cos * (normals @ v)[:, None] - (env_dirs @ v)[None, :]
        lobe = np.power(np.maximum(r_dot_v, 0.0), alpha[:, None])
        return ks * (lobe @ env_flux)

    @staticmethod
    def _assemble(probe: Probe, shading: np.ndarray, diffuse: np.ndarray, highlight: np.ndarray) -> LayerSet:
        inside = probe.silhouette
        shape = probe.shape + (3,)

        def scatter(values: np.ndarray) -> np.ndarray:
            out = np.zeros(shape)
            out[inside] = values
            return out

        shading_img = scatter(shading)
        diffuse_img = scatter(diffuse)
        highlight_img = scatter(highlight)

        total = shading_img.sum(axis=2, keepdims=True)
        valid = inside & (total[..., 0] > 0)
        chroma = np.full(probe.shape + (2,), np.nan)
        chroma[valid] = shading_img[valid][:, :2] / total[valid]

        return LayerSet(
            composite=Image(diffuse_img + highlight_img),
            diffuse=Image(diffuse_img),
            highlight=Image(highlight_img),
            shading=Image(shading_img),
            shading_chromaticity=chroma,
            normals=probe.normals.copy(),
        )


def render_probe(probe: Probe, material: Material, env: EnvironmentMap,
                 view: ArrayLike = (0.0, 0.0, 1.0), config: Optional[Config] = None) -> LayerSet:
    return ProbeRenderer(config).render_probe(probe, material, env, view)


def clip_to_ldr(img: Image, clip_level: float) -> Image:
    """Clamp at clip_level and rescale into [0, 1], marking clipped channels"""
    if clip_level <= 0:
        raise DomainError("clip level must be positive")
    mask = img.pixels > clip_level
    return Image(np.minimum(img.pixels, clip_level) / clip_level, mask)


def saturation_mask(img: Image, clip_level: float = 1.0, ratio: float = 0.98) -> np.ndarray:
    """Channels at or above ratio * clip_level, merged with any recorded clipping"""
    return (img.pixels >= ratio * clip_level) | img.saturation_mask


def shading_chromaticity_rgb(chroma: np.ndarray) -> np.ndarray:
    """(r, g) shading chromaticity -> (r, g, b) with b = 1 - r - g"""
    chroma = np.asarray(chroma, dtype=np.float64)
    if chroma.shape[-1] == 3:
        return chroma
    return np.concatenate([chroma, 1.0 - chroma[..., :1] - chroma[..., 1:2]], axis=-1)
