"""
Low-rank diffuse chromaticity loss and optimisation-based highlight separation

Four views of one probe under colour-consistent lighting share a diffuse
chromaticity, so the matrix D that stacks their (r, g) chromaticity maps row
by row is rank one. The second singular value of D measures how far a
candidate highlight split is from that; the separator drives it down by
projected gradient descent over per-pixel highlight variables.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .core import Image
from .errors import ConvergenceError, DomainError
from .renderer import saturation_mask

logger = logging.getLogger(__name__)

GAP_TOLERANCE = 1e-8
DIVERGENCE_PATIENCE = 10
MAX_BACKTRACKS = 40
# singular values within this fraction of sigma2 are descended together
CLUSTER_RATIO = 0.05


@dataclass
class ChromaStack:
    """D: one row per image, (r, g) pairs of every participating pixel interleaved"""
    D: np.ndarray
    pixels: np.ndarray
    shape: Tuple[int, int]

    @property
    def pixel_count(self) -> int:
        return int(self.pixels.sum())


@dataclass
class LowRankLoss:
    """sigma2 of D with its gradient dsigma2/dD = U[:, 1] V[:, 1]^T"""
    value: float
    gradient: np.ndarray
    singular_values: np.ndarray
    U: np.ndarray
    V: np.ndarray
    subgradient: bool


@dataclass
class SeparationProblem:
    """Aligned composites of one probe plus the optimiser settings"""
    batch: List[Image]
    mask: Optional[np.ndarray] = None
    step_size: float = 0.5
    iteration_budget: int = 500
    line_search: bool = True
    highlight_model: str = "dichromatic"
    highlight_color: Sequence[float] = (1.0, 1.0, 1.0)
    epsilon: float = 1e-4
    tolerance: float = 1e-7
    clip_level: float = 1.0
    saturation_ratio: float = 0.98

    def __post_init__(self):
        if len(self.batch) < 2:
            raise DomainError("separation needs at least two images of the same probe")
        shapes = {img.pixels.shape for img in self.batch}
        if len(shapes) != 1:
            raise DomainError(f"batch images differ in shape: {sorted(shapes)}")
        if self.batch[0].channels != 3:
            raise DomainError("separation needs RGB images")
        if self.highlight_model not in ("dichromatic", "free"):
            raise DomainError(f"unknown highlight model {self.highlight_model!r}")
        if self.step_size <= 0 or self.iteration_budget < 0:
            raise DomainError("step size must be positive and the iteration budget non-negative")
        if self.clip_level <= 0 or not 0 < self.saturation_ratio <= 1:
            raise DomainError("clip level must be positive and the saturation ratio in (0, 1]")
        color = np.asarray(self.highlight_color, dtype=np.float64)
        if color.shape != (3,) or np.any(color < 0) or color.sum() <= 0:
            raise DomainError("highlight colour must be a non-negative RGB triple")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.batch[0].pixels.shape[:2]:
                raise DomainError("loss mask does not match the batch images")
            if not self.mask.any():
                raise DomainError("loss mask is empty")

    @classmethod
    def from_config(cls, batch: List[Image], config: Config, mask: Optional[np.ndarray] = None) -> 'SeparationProblem':
        return cls(batch=batch, mask=mask,
                   step_size=config.separation_step_size,
                   iteration_budget=config.separation_iterations,
                   line_search=config.separation_line_search,
                   highlight_model=config.highlight_model,
                   highlight_color=config.highlight_color,
                   epsilon=config.chroma_epsilon,
                   clip_level=config.clip_level,
                   saturation_ratio=config.saturation_ratio)


@dataclass
class SeparationResult:
    """Recovered layers plus the optimisation record"""
    highlights: List[Image]
    diffuse: List[Image]
    initial_loss: float
    final_loss: float
    iterations: int
    converged: bool
    excluded: np.ndarray
    subgradient_steps: int = 0
    trace: List[Dict[str, Any]] = field(default_factory=list)

    def trace_records(self) -> List[str]:
        return [f"iteration={t['iteration']} loss={t['loss']:.12g} step={t['step']:.6g}" for t in self.trace]


def chromaticity(img: Image, epsilon: float = 1e-4) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel (r, g) = (I_r, I_g) / (I_r + I_g + I_b); pixels whose sum is below epsilon are invalid"""
    if img.channels != 3:
        raise DomainError("chromaticity needs a 3-channel image")
    if np.any(img.pixels < 0):
        raise DomainError("chromaticity needs non-negative values")
    total = img.pixels.sum(axis=2)
    valid = total >= epsilon
    chroma = np.zeros(img.pixels.shape[:2] + (2,))
    chroma[valid] = img.pixels[valid][:, :2] / total[valid][:, None]
    return chroma, valid


def build_chroma_stack(images: Sequence[Image], mask: Optional[np.ndarray] = None,
                       epsilon: float = 1e-4, clip_level: float = 1.0,
                       saturation_ratio: float = 0.98) -> ChromaStack:
    """Stack chromaticities of pixels valid and unsaturated in every image

    A channel at or above saturation_ratio * clip_level counts as saturated.
    """
    shape = images[0].pixels.shape[:2]
    participating = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    maps = []
    for img in images:
        chroma, valid = chromaticity(img, epsilon)
        participating &= valid & ~saturation_mask(img, clip_level, saturation_ratio).any(axis=2)
        maps.append(chroma)
    if not participating.any():
        raise DomainError("no pixel is valid and unsaturated in every image")
    D = np.stack([m[participating].reshape(-1) for m in maps])
    return ChromaStack(D, participating, shape)


def sigma2_loss(D: np.ndarray, method: str = "qr") -> LowRankLoss:
    """Second singular value of D and its analytic gradient"""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] < 2:
        raise DomainError("sigma2 needs a matrix with at least two rows")
    if not np.all(np.isfinite(D)):
        raise DomainError("D contains NaN or Inf")

    if method == "qr":
        U, s, V = _svd_qr(D)
    elif method == "gram":
        U, s, V = _svd_gram(D)
    else:
        raise DomainError(f"unknown SVD method {method!r}")

    if min(D.shape) < 2:
        # a single column is rank one whatever its values
        return LowRankLoss(0.0, np.zeros_like(D), s[:1], U, V, False)
    sigma2 = float(s[1])
    gaps = [s[0] - s[1]]
    if len(s) > 2:
        gaps.append(s[1] - s[2])
    subgradient = bool(min(gaps) < GAP_TOLERANCE)
    gradient = np.outer(U[:, 1], V[:, 1])
    return LowRankLoss(sigma2, gradient, s, U, V, subgradient)


def _svd_qr(D: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # D^T = Q R, so D = R^T Q^T = (U S W^T) Q^T and V = Q W
    Q, R = np.linalg.qr(D.T)
    U, s, Wt = np.linalg.svd(R.T)
    return U, s, Q @ Wt.T


def _svd_gram(D: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    eigvals, eigvecs = np.linalg.eigh(D @ D.T)
    order = np.argsort(eigvals)[::-1]
    s = np.sqrt(np.clip(eigvals[order], 0.0, None))
    U = eigvecs[:, order]
    V = np.zeros((D.shape[1], len(s)))
    nonzero = s > s[0] * 1e-12 if s[0] > 0 else np.zeros_like(s, dtype=bool)
    V[:, nonzero] = (D.T @ U[:, nonzero]) / s[nonzero]
    return U, s, V


class HighlightSeparator:
    """Projected gradient descent on the low-rank chromaticity loss"""

    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()

    def separate(self, problem: SeparationProblem) -> SeparationResult:
        """Split each composite into highlight and diffuse layers"""

        stack = build_chroma_stack(problem.batch, problem.mask, problem.epsilon,
                                   problem.clip_level, problem.saturation_ratio)
        participating = stack.pixels
        composites = np.stack([img.pixels[participating] for img in problem.batch])  # (K, n, 3)
        color = np.asarray(problem.highlight_color, dtype=np.float64)
        dichromatic = problem.highlight_model == "dichromatic"
        eps = problem.epsilon

        if dichromatic:
            with np.errstate(divide='ignore'):
                per_channel = np.where(color > 0, composites / np.where(color > 0, color, 1.0), np.inf)
            upper = np.minimum(per_channel.min(axis=2), (composites.sum(axis=2) - eps) / color.sum())
            upper = np.maximum(upper, 0.0)
            x = np.zeros(upper.shape)
        else:
            upper = composites
            x = np.zeros(composites.shape)

        def highlights_of(x: np.ndarray) -> np.ndarray:
            return x[..., None] * color if dichromatic else x

        def evaluate(x: np.ndarray):
            diffuse = composites - highlights_of(x)
            total = np.maximum(diffuse.sum(axis=2), eps)
            r = diffuse[..., 0] / total
            g = diffuse[..., 1] / total
            D = np.stack([r, g], axis=2).reshape(len(composites), -1)
            return sigma2_loss(D), r, g, total

        loss, r, g, total = evaluate(x)
        initial = loss.value
        trace = [{'iteration': 0, 'loss': initial, 'step': 0.0}]
        logger.info("Separating %d images over %d pixels, initial sigma2 %.6g",
                    len(composites), stack.pixel_count, initial)

        step = problem.step_size
        max_step = problem.step_size * 16
        increases = 0
        subgradient_steps = 0
        converged = initial <= 1e-12
        iteration = 0
        stalled = 0
        best_x, best_loss = x, loss

        while not converged and iteration < problem.iteration_budget:
            iteration += 1
            if loss.subgradient:
                subgradient_steps += 1
            direction = self._descent_direction(loss, r, g, total, color, dichromatic, eps)

            if problem.line_search:
                accepted = False
                for _ in range(MAX_BACKTRACKS):
                    candidate = np.clip(x - step * direction, 0.0, upper)
                    new_loss, new_r, new_g, new_total = evaluate(candidate)
                    if new_loss.value < loss.value:
                        accepted = True
                        break
                    step *= 0.5
                if not accepted:
                    converged = True
                    break
            else:
                candidate = np.clip(x - step * direction, 0.0, upper)
                new_loss, new_r, new_g, new_total = evaluate(candidate)
                increases = increases + 1 if new_loss.value > loss.value else 0
                if increases >= DIVERGENCE_PATIENCE:
                    trace.append({'iteration': iteration, 'loss': new_loss.value, 'step': step})
                    raise ConvergenceError(
                        f"sigma2 increased for {DIVERGENCE_PATIENCE} consecutive steps", trace)

            decrease = (loss.value - new_loss.value) / max(loss.value, 1e-300)
            x, loss, r, g, total = candidate, new_loss, new_r, new_g, new_total
            trace.append({'iteration': iteration, 'loss': loss.value, 'step': step})
            logger.debug("iteration %d sigma2 %.6g step %.3g", iteration, loss.value, step)
            if loss.value < best_loss.value:
                best_x, best_loss = x, loss

            stalled = stalled + 1 if 0 <= decrease < problem.tolerance else 0
            if loss.value <= 1e-12 or stalled >= 5:
                converged = True
            if problem.line_search:
                step = min(step * 2.0, max_step)

        if best_loss.value < loss.value:
            # fixed steps may climb; hand back the lowest sigma2 seen
            logger.warning("Last iterate has sigma2 %.6g, returning the best iterate at %.6g",
                           loss.value, best_loss.value)
            x, loss = best_x, best_loss
        if subgradient_steps:
            logger.warning("%d iterations hit repeated singular values; a subgradient was used", subgradient_steps)
        logger.info("Separation finished after %d iterations: sigma2 %.6g -> %.6g",
                    iteration, initial, loss.value)

        return self._result(problem, participating, highlights_of(x), initial, loss.value,
                            iteration, converged, subgradient_steps, trace)

    @staticmethod
    def _descent_direction(loss: LowRankLoss, r: np.ndarray, g: np.ndarray, total: np.ndarray,
                           color: np.ndarray, dichromatic: bool, eps: float) -> np.ndarray:
        """Scaled gradient of sigma2^2 with respect to the highlight variables

        Singular values within CLUSTER_RATIO of sigma2 are descended together so
        the step stays a descent direction where sigma2 is not simple.
        """
        s = loss.singular_values
        cluster = [i for i in range(1, len(s)) if s[i] >= (1.0 - CLUSTER_RATIO) * s[1]] or [1]
        grad_D = sum(2.0 * s[i] * np.outer(loss.U[:, i], loss.V[:, i]) for i in cluster)
        K = r.shape[0]
        grad_D = grad_D.reshape(K, -1, 2)
        g_r, g_g = grad_D[..., 0], grad_D[..., 1]

        # dF/dI_c = (G_c - (G_r r + G_g g)) / S with G_b = 0
        common = g_r * r + g_g * g
        dF_dI = np.stack([g_r - common, g_g - common, -common], axis=2) / total[..., None]
        # dr/dI and dg/dI rows for the curvature scaling
        dr = np.stack([1.0 - r, -r, -r], axis=2) / total[..., None]
        dg = np.stack([-g, 1.0 - g, -g], axis=2) / total[..., None]

        if dichromatic:
            grad = -(dF_dI @ color)
            curvature = (dr @ color) ** 2 + (dg @ color) ** 2
        else:
            grad = -dF_dI
            curvature = dr ** 2 + dg ** 2
        damping = 1e-6 * float(curvature.max()) + 1e-12
        return grad / (2.0 * curvature + damping)

    @staticmethod
    def _result(problem: SeparationProblem, participating: np.ndarray, highlights: np.ndarray,
                initial: float, final: float, iterations: int, converged: bool,
                subgradient_steps: int, trace: List[Dict[str, Any]]) -> SeparationResult:
        layers, diffuse = [], []
        for k, img in enumerate(problem.batch):
            h = np.zeros(img.pixels.shape)
            h[participating] = highlights[k]
            layers.append(Image(h))
            diffuse.append(Image(img.pixels - h, img.saturation_mask))
        region = np.ones(participating.shape, dtype=bool) if problem.mask is None else problem.mask
        return SeparationResult(
            highlights=layers,
            diffuse=diffuse,
            initial_loss=initial,
            final_loss=final,
            iterations=iterations,
            converged=converged,
            excluded=region & ~participating,
            subgradient_steps=subgradient_steps,
            trace=trace,
        )


def separate_highlights(problem: SeparationProblem, config: Optional[Config] = None) -> SeparationResult:
    return HighlightSeparator(config).separate(problem)
