"""
Image and environment-map error metrics, and the relighting protocol
"""

import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import Config
from .core import EnvironmentMap, Image, Material, Probe, luminance, make_sphere_probe
from .errors import DomainError
from .renderer import ProbeRenderer

logger = logging.getLogger(__name__)

ImageLike = Union[Image, EnvironmentMap, np.ndarray]
SSIM_WINDOW = 8


def _pixels(img: ImageLike) -> np.ndarray:
    if isinstance(img, (Image, EnvironmentMap)):
        return img.pixels
    pixels = np.asarray(img, dtype=np.float64)
    return pixels[..., None] if pixels.ndim == 2 else pixels


def _pair(a: ImageLike, b: ImageLike):
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise DomainError(f"image dimensions differ: {pa.shape} vs {pb.shape}")
    return pa, pb


def rmse(a: ImageLike, b: ImageLike, mask: Optional[np.ndarray] = None) -> float:
    """Root mean square of per-channel differences over the masked pixels"""
    pa, pb = _pair(a, b)
    diff = pa - pb
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pa.shape[:2]:
            raise DomainError("mask does not match the image dimensions")
        diff = diff[mask]
    if diff.size == 0:
        raise DomainError("mask selects no pixels")
    return float(np.sqrt(np.mean(np.square(diff))))


def nrmse(estimate: ImageLike, reference: ImageLike, mask: Optional[np.ndarray] = None) -> float:
    """RMSE divided by the value range of the estimate"""
    pe = _pixels(estimate)
    values = pe if mask is None else pe[np.asarray(mask, dtype=bool)]
    spread = float(values.max() - values.min()) if values.size else 0.0
    if spread <= 0:
        raise DomainError("estimate is constant; normalised RMSE is undefined")
    return rmse(estimate, reference, mask) / spread


def ssim(a: ImageLike, b: ImageLike, data_range: float = 1.0) -> float:
    """Mean SSIM over every 8x8 window of the luminance images"""
    pa, pb = _pair(a, b)
    la, lb = luminance(pa), luminance(pb)
    if la.shape[0] < SSIM_WINDOW or la.shape[1] < SSIM_WINDOW:
        raise DomainError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(la, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(lb, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = wa.var(axis=(2, 3))
    var_b = wb.var(axis=(2, 3))
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


@dataclass
class RelightError:
    rmse_diffuse: float
    rmse_glossy: float
    coverage: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def relight_error(gt_env: EnvironmentMap, est_env: EnvironmentMap, probe: Optional[Probe] = None,
                  config: Optional[Config] = None) -> RelightError:
    """Render a diffuse and a glossy object under both maps and compare

    Both maps are restricted to the estimate's coverage. Each diffuse render is
    divided by its own maximum and the glossy render under the same map by the
    same factor, which makes the comparison blind to global scale.
    """

    config = config or Config()
    if gt_env.pixels.shape != est_env.pixels.shape:
        raise DomainError("ground-truth and estimated maps differ in size")
    coverage = est_env.coverage
    if not coverage.any():
        raise DomainError("estimated map has no coverage")

    probe = probe or make_sphere_probe(config.relight_resolution)
    diffuse = Material([0.0], [1.0], [1.0, 1.0, 1.0])
    glossy = Material([config.relight_glossy_albedo], [config.relight_glossy_roughness], [0.0, 0.0, 0.0])
    renderer = ProbeRenderer(config)
    inside = probe.silhouette

    def renders(env: EnvironmentMap):
        restricted = EnvironmentMap(env.pixels * coverage[..., None], coverage)
        d = renderer.render_probe(probe, diffuse, restricted).composite.pixels
        g = renderer.render_probe(probe, glossy, restricted).composite.pixels
        peak = float(d[inside].max())
        scale = 1.0 / peak if peak > 0 else 1.0
        return d * scale, g * scale

    gt_d, gt_g = renders(gt_env)
    est_d, est_g = renders(est_env)
    result = RelightError(
        rmse_diffuse=rmse(est_d, gt_d, inside),
        rmse_glossy=rmse(est_g, gt_g, inside),
        coverage=float(coverage.mean()),
    )
    logger.info("Relighting error: diffuse %.4g, glossy %.4g at %.1f%% coverage",
                result.rmse_diffuse, result.rmse_glossy, 100.0 * result.coverage)
    return result
