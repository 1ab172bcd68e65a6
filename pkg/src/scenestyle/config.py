"""Run configuration.

Every hyperparameter of the method is a key here. Defaults follow the values
used for ScanNet-scale scenes; desk-scale fixtures override the resolutions.
Config files are YAML mappings whose keys are the dataclass field names.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


# Help text for each key, shown by the CLI.
KEY_HELP = {
    "lambda_content": "content loss weight",
    "lambda_style": "style loss weight (magnitude depends on the feature backend)",
    "lambda_reg": "Laplacian-texture detail regularization weight",
    "theta_min": "minimum render height in pixels, used at depth theta_d",
    "theta_d": "minimum depth in meters mapped to theta_min",
    "theta_a": "angle threshold in degrees for the fine style term",
    "pyramid_heights": "render pyramid heights in pixels, strictly increasing",
    "texture_resolution": "side length of the square texture",
    "texture_levels": "number of Laplacian texture levels",
    "epochs": "passes over all frames",
    "frame_repeats": "consecutive optimization steps per frame",
    "lr": "initial learning rate",
    "lr_decay": "multiplicative learning-rate decay factor",
    "lr_decay_every": "epochs between learning-rate decays",
    "adam_betas": "adaptive-moment decay rates",
    "adam_eps": "adaptive-moment denominator epsilon",
    "blur_threshold": "minimum Laplacian variance of a kept frame (grayscale in [0,1])",
    "depth_unit": "meters per stored depth unit",
    "seed": "seed for all randomness (test backend weights)",
    "min_part_positions": "minimum masked positions at the deepest style tap for a level to count",
    "style_min_size": "halve the style image while its smaller side stays at or above this",
    "view_direction": "per_pixel or camera_axis for the normal-to-view angle",
    "blend_mode": "nearest_dominant or strict (depth blend weight convention)",
    "erode_levels": "apply the 3x3 minimum filter to the depth-level map",
    "backend": "feature extractor: vgg19, vgg16 or test",
    "weights_path": "local file with pretrained extractor weights",
    "test_channels": "per-stage channel widths of the test backend",
    "test_beta": "softplus sharpness of the test backend (large values approach ReLU)",
    "test_structured": "test backend carries colors and adds Laplacian/gradient channels per stage",
    "init_color": "initial texture color",
    "single_level_height": "render height for the single-level ablation modes",
    "background": "background color of textured renders",
    "depth_tolerance": "depth consistency tolerance in meters for reprojection validity",
    "clamp_texture": "after each step, move the finest level so the composite stays in [0, 1]",
}


@dataclass
class Config:
    lambda_content: float = 70.0
    lambda_style: float = 1e-4
    lambda_reg: float = 5000.0
    theta_min: float = 32.0
    theta_d: float = 0.25
    theta_a: float = 30.0
    pyramid_heights: list[int] = field(default_factory=lambda: [256, 432, 608, 784])
    texture_resolution: int = 4096
    texture_levels: int = 4
    epochs: int = 7
    frame_repeats: int = 10
    lr: float = 1.0
    lr_decay: float = 0.1
    lr_decay_every: int = 3
    adam_betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    blur_threshold: float = 1e-4
    depth_unit: float = 0.001
    seed: int = 0
    min_part_positions: int = 16
    style_min_size: int = 256
    view_direction: str = "per_pixel"
    blend_mode: str = "nearest_dominant"
    erode_levels: bool = True
    backend: str = "vgg19"
    weights_path: str | None = None
    test_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    test_beta: float = 8.0
    test_structured: bool = True
    init_color: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    single_level_height: int | None = None
    background: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    depth_tolerance: float = 0.05
    clamp_texture: bool = False

    def __post_init__(self):
        self.pyramid_heights = [int(h) for h in self.pyramid_heights]
        self.validate()

    @property
    def num_levels(self) -> int:
        return len(self.pyramid_heights)

    def validate(self) -> None:
        h = self.pyramid_heights
        if not h:
            raise ConfigError("pyramid_heights must not be empty")
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError(f"pyramid_heights must be strictly increasing, got {h}")
        if h[0] <= 0:
            raise ConfigError("pyramid heights must be positive")
        if not self.theta_d > 0:
            raise ConfigError(f"theta_d must be > 0, got {self.theta_d}")
        if not 0.0 < self.theta_a <= 90.0:
            # 90 degrees is admitted so the angle filter can be disabled.
            raise ConfigError(f"theta_a must be in (0, 90], got {self.theta_a}")
        if self.theta_min <= 0:
            raise ConfigError("theta_min must be > 0")
        if self.texture_levels < 1:
            raise ConfigError("texture_levels must be >= 1")
        if self.texture_resolution % (2 ** (self.texture_levels - 1)):
            raise ConfigError(
                f"texture_resolution {self.texture_resolution} is not divisible by "
                f"2^{self.texture_levels - 1}"
            )
        if self.view_direction not in ("per_pixel", "camera_axis"):
            raise ConfigError(f"unknown view_direction {self.view_direction!r}")
        if self.blend_mode not in ("nearest_dominant", "strict"):
            raise ConfigError(f"unknown blend_mode {self.blend_mode!r}")
        if self.backend not in ("vgg19", "vgg16", "test"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.blur_threshold < 0:
            raise ConfigError("blur_threshold must be >= 0")
        if self.epochs < 0 or self.frame_repeats < 1:
            raise ConfigError("epochs must be >= 0 and frame_repeats >= 1")
        if len(self.init_color) != 3 or len(self.background) != 3:
            raise ConfigError("colors must have three components")

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a key-value mapping")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def cos_theta_a(self) -> float:
        return math.cos(math.radians(self.theta_a))
