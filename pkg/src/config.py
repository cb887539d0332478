"""
Configuration management for LumiProbe
"""

import os
import yaml
from pathlib import Path
from typing import Dict, Any, List, Optional
from dataclasses import dataclass, field, asdict

from dotenv import load_dotenv

from .core import MapSize, Material
from .errors import ConfigError


def _default_material() -> Dict[str, Any]:
    return {
        'diffuse_albedo': [0.75, 0.55, 0.45],
        'regions': [{'specular_albedo': 0.3, 'roughness': 120.0}],
    }


def _default_skin_types() -> List[Dict[str, Any]]:
    return [
        {'name': 'light', 'diffuse_albedo': [0.80, 0.62, 0.52],
         'regions': [{'specular_albedo': 0.30, 'roughness': 120.0}]},
        {'name': 'medium', 'diffuse_albedo': [0.62, 0.44, 0.34],
         'regions': [{'specular_albedo': 0.25, 'roughness': 100.0}]},
        {'name': 'dark', 'diffuse_albedo': [0.36, 0.24, 0.18],
         'regions': [{'specular_albedo': 0.20, 'roughness': 80.0}]},
    ]


@dataclass
class Config:
    """Configuration class for LumiProbe"""

    # Environment map
    envmap_width: int = 128
    envmap_height: int = 64

    # Radiometry
    chroma_epsilon: float = 1e-4
    clip_level: float = 1.0
    saturation_ratio: float = 0.98

    # Renderer
    highlight_quadrature: str = "lobe"
    quadrature_theta: int = 24
    quadrature_phi: int = 32
    render_chunk_size: int = 256
    max_workers: int = 4

    # Tracing and deconvolution
    knn: int = 4
    coverage_factor: float = 2.0
    kernel_cutoff_level: float = 1e-3
    rl_iterations: int = 30
    rl_tolerance: float = 1e-4

    # Highlight separation
    separation_step_size: float = 0.5
    separation_iterations: int = 500
    separation_line_search: bool = True
    highlight_model: str = "dichromatic"
    highlight_color: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    # Lights
    nms_radius_deg: float = 10.0
    nms_threshold: float = 0.5
    color_tolerance: float = 0.05

    # Relighting evaluation
    relight_resolution: int = 64
    relight_glossy_roughness: float = 500.0
    relight_glossy_albedo: float = 1.0

    # Materials
    material: Dict[str, Any] = field(default_factory=_default_material)
    skin_types: List[Dict[str, Any]] = field(default_factory=_default_skin_types)

    # Output settings
    output_directory: str = "output"
    log_level: str = "INFO"
    seed: int = 0

    @classmethod
    def from_file(cls, config_path: Optional[str]) -> 'Config':
        """Load configuration from YAML file, then apply environment overrides"""
        load_dotenv()
        config_path = config_path or os.getenv('LUMIPROBE_CONFIG')
        config = cls()

        if config_path and Path(config_path).exists():
            with open(config_path, 'r') as f:
                config_data = yaml.safe_load(f) or {}
            try:
                config = cls(**config_data)
            except TypeError as e:
                raise ConfigError(f"{config_path}: {e}") from e

        seed = os.getenv('LUMIPROBE_SEED')
        if seed is not None:
            try:
                config.seed = int(seed)
            except ValueError as e:
                raise ConfigError(f"LUMIPROBE_SEED must be an integer, got {seed!r}") from e

        config.validate()
        return config

    def validate(self):
        """Reject values no stage can work with"""
        if self.envmap_width != 2 * self.envmap_height or self.envmap_height <= 0:
            raise ConfigError("envmap_width must equal 2 * envmap_height")
        if self.highlight_quadrature not in ("lobe", "pixel"):
            raise ConfigError(f"unknown highlight_quadrature {self.highlight_quadrature!r}")
        if self.highlight_model not in ("dichromatic", "free"):
            raise ConfigError(f"unknown highlight_model {self.highlight_model!r}")
        if self.knn < 1:
            raise ConfigError("knn must be >= 1")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")
        if self.clip_level <= 0 or not 0 < self.saturation_ratio <= 1:
            raise ConfigError("clip_level must be positive and saturation_ratio in (0, 1]")
        if not self.material.get('regions'):
            raise ConfigError("material region table is empty")

    @property
    def map_size(self) -> MapSize:
        return MapSize(self.envmap_width, self.envmap_height)

    def default_material(self) -> Material:
        return Material.from_dict(self.material)

    def skin_type_materials(self) -> Dict[str, Material]:
        return {entry['name']: Material.from_dict(entry) for entry in self.skin_types}

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary"""
        return asdict(self)

    def save(self, config_path: str):
        """Save configuration to YAML file"""
        config_path = Path(config_path)
        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, 'w') as f:
            yaml.dump(self.to_dict(), f, default_flow_style=False)

