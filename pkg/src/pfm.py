"""
PFM (portable float map) reading and writing, plus tone-mapped PNG previews

PFM layout: an ASCII "PF" (RGB) or "Pf" (greyscale) line, a "width height"
line, a scale line whose sign gives the byte order (negative = little
endian), then 32-bit floats with the bottom row first.
"""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .core import EnvironmentMap, Image
from .envmap import KernelParamMap
from .errors import PFMFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MASK_SUFFIX = ".mask.pfm"


def _read_token_line(data: bytes, offset: int, what: str) -> Tuple[str, int]:
    end = data.find(b"\n", offset)
    if end < 0:
        raise PFMFormatError(f"unterminated {what} line", offset)
    try:
        return data[offset:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError as e:
        raise PFMFormatError(f"non-ASCII {what} line", offset) from e


def parse_pfm(data: bytes) -> np.ndarray:
    """Decode PFM bytes into an (H, W, C) float32 array, top row first"""

    tag, offset = _read_token_line(data, 0, "identifier")
    if tag == "PF":
        channels = 3
    elif tag == "Pf":
        channels = 1
    else:
        raise PFMFormatError(f"unknown identifier {tag!r}", 0)

    dims_at = offset
    dims, offset = _read_token_line(data, offset, "dimensions")
    parts = dims.split()
    try:
        width, height = (int(p) for p in parts)
    except ValueError as e:
        raise PFMFormatError(f"bad dimensions line {dims!r}", dims_at) from e
    if width <= 0 or height <= 0:
        raise PFMFormatError(f"non-positive dimensions {width}x{height}", dims_at)

    scale_at = offset
    scale_text, offset = _read_token_line(data, offset, "scale")
    try:
        scale = float(scale_text)
    except ValueError as e:
        raise PFMFormatError(f"bad scale line {scale_text!r}", scale_at) from e
    if scale == 0 or not np.isfinite(scale):
        raise PFMFormatError("scale must be a non-zero finite number", scale_at)
    dtype = np.dtype('<f4') if scale < 0 else np.dtype('>f4')

    expected = width * height * channels * 4
    available = len(data) - offset
    if available < expected:
        raise PFMFormatError(f"payload truncated: expected {expected} bytes, found {available}",
                             offset + available)

    values = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=offset)
    pixels = values.reshape(height, width, channels)[::-1]
    return pixels.astype(np.float32)


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as f:
        data = f.read()
    logger.debug("Reading %s (%d bytes)", path, len(data))
    return parse_pfm(data)


def encode_pfm(pixels: np.ndarray, little_endian: bool = True) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise ValueError(f"PFM stores 1 or 3 channels, got shape {pixels.shape}")
    height, width, channels = pixels.shape
    tag = "PF" if channels == 3 else "Pf"
    scale = "-1.0" if little_endian else "1.0"
    dtype = '<f4' if little_endian else '>f4'
    header = f"{tag}\n{width} {height}\n{scale}\n".encode("ascii")
    payload = np.ascontiguousarray(pixels[::-1], dtype=dtype).tobytes()
    return header + payload


def write_pfm(path: PathLike, pixels: np.ndarray, little_endian: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_pfm(pixels, little_endian))
    logger.debug("Wrote %s", path)


def mask_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + MASK_SUFFIX)


def write_image(path: PathLike, img: Image):
    """Pixels as PFM; a saturation sidecar only when something is saturated"""
    write_pfm(path, img.pixels)
    if img.saturation_mask.any():
        write_pfm(mask_path(path), img.saturation_mask.astype(np.float32))


def read_image(path: PathLike) -> Image:
    pixels = read_pfm(path)
    sidecar = mask_path(path)
    mask = read_pfm(sidecar) > 0.5 if sidecar.exists() else None
    return Image(pixels, mask)


def write_envmap(path: PathLike, env: EnvironmentMap):
    write_pfm(path, env.pixels)
    write_pfm(mask_path(path), env.coverage.astype(np.float32))


def read_envmap(path: PathLike) -> EnvironmentMap:
    """Map plus its coverage sidecar; a missing sidecar means full coverage"""
    pixels = read_pfm(path)
    sidecar = mask_path(path)
    coverage = read_pfm(sidecar)[..., 0] > 0.5 if sidecar.exists() else None
    return EnvironmentMap(pixels, coverage)


def write_kernel_params(path: PathLike, params: KernelParamMap):
    """Channels: roughness, specular albedo, coverage"""
    planes = np.stack([params.alpha, params.specular_albedo, params.coverage.astype(np.float64)], axis=2)
    write_pfm(path, planes)


def read_kernel_params(path: PathLike) -> KernelParamMap:
    planes = read_pfm(path).astype(np.float64)
    if planes.shape[2] != 3:
        raise PFMFormatError("kernel parameter maps have three channels", 0)
    return KernelParamMap(planes[..., 0], planes[..., 1], planes[..., 2] > 0.5)


def read_normals(path: PathLike) -> np.ndarray:
    normals = read_pfm(path).astype(np.float64)
    if normals.shape[2] != 3:
        raise PFMFormatError("normal maps have three channels", 0)
    return normals


def tonemap(pixels: np.ndarray, percentile: float = 99.0, gamma: float = 2.2,
            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Scale so the given percentile maps to 1, clamp, gamma encode to 8 bits"""
    pixels = np.nan_to_num(np.asarray(pixels, dtype=np.float64), nan=0.0, posinf=0.0)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[..., 0]
    sample = pixels if mask is None else pixels[np.asarray(mask, dtype=bool)]
    positive = sample[sample > 0]
    scale = float(np.percentile(positive, percentile)) if positive.size else 1.0
    scaled = np.clip(pixels / (scale if scale > 0 else 1.0), 0.0, 1.0)
    return np.round(255.0 * scaled ** (1.0 / gamma)).astype(np.uint8)


def write_png_preview(path: PathLike, pixels: np.ndarray, mask: Optional[np.ndarray] = None):
    """Display-only preview; nothing in the pipeline reads these back"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(tonemap(pixels, mask=mask)).save(path)
    logger.debug("Wrote preview %s", path)
