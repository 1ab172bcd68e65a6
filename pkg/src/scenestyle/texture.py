"""Laplacian-pyramid texture: the optimization variable.

Level 0 is the finest band at full resolution R, level k has R / 2^k texels
per side and the last level is the low-frequency base. The flat texture is
the sum of all levels bilinearly upsampled to R x R.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from scenestyle.config import Config, ConfigError
from scenestyle.container import read_container, write_container
from scenestyle.rasterizer import GBuffer


class LaplacianTexture:
    def __init__(self, levels: list[torch.Tensor]):
        # each level is (3, r, r); kept as leaf tensors so torch optimizers can own them
        self.levels = levels

    @property
    def resolution(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def dtype(self) -> torch.dtype:
        return self.levels[0].dtype

    def parameters(self) -> list[torch.Tensor]:
        return self.levels

    def detached(self) -> "LaplacianTexture":
        return LaplacianTexture([lvl.detach().clone() for lvl in self.levels])

    def requires_grad_(self, flag: bool = True) -> "LaplacianTexture":
        for lvl in self.levels:
            lvl.requires_grad_(flag)
        return self

    def save(self, directory: str | Path, prefix: str = "texture") -> None:
        directory = Path(directory)
        for k, lvl in enumerate(self.levels):
            arr = lvl.detach().cpu().numpy()
            write_container(directory / f"{prefix}.level{k}.bin", {c: arr[i] for i, c in enumerate("rgb")})

    @classmethod
    def load(cls, directory: str | Path, num_levels: int, prefix: str = "texture",
             dtype: torch.dtype = torch.float32) -> "LaplacianTexture":
        levels = []
        for k in range(num_levels):
            planes = read_container(Path(directory) / f"{prefix}.level{k}.bin")
            arr = np.stack([planes[c] for c in "rgb"])
            levels.append(torch.from_numpy(arr).to(dtype))
        return cls(levels)


def init_texture(config: Config, init_color=None, dtype: torch.dtype = torch.float32) -> LaplacianTexture:
    """Base level filled with ``init_color``, detail levels zero."""
    res, n = config.texture_resolution, config.texture_levels
    if res % (2 ** (n - 1)):
        raise ConfigError(f"texture_resolution {res} is not divisible by 2^{n - 1}")
    color = torch.as_tensor(config.init_color if init_color is None else init_color, dtype=dtype)
    levels = []
    for k in range(n):
        r = res // 2 ** k
        lvl = torch.zeros(3, r, r, dtype=dtype)
        if k == n - 1:
            lvl += color.view(3, 1, 1)
        levels.append(lvl)
    return LaplacianTexture(levels)


def composite(texture: LaplacianTexture, clamp: bool = False) -> torch.Tensor:
    """Flat (3, R, R) texture; ``clamp`` limits values to [0, 1] for export."""
    r = texture.resolution
    out = texture.levels[0]
    for lvl in texture.levels[1:]:
        up = F.interpolate(lvl[None], size=(r, r), mode="bilinear", align_corners=False)[0]
        out = out + up
    return out.clamp(0.0, 1.0) if clamp else out


@torch.no_grad()
def project_range(texture: LaplacianTexture) -> None:
    """Shift the finest level in place so the composite lies in [0, 1]."""
    flat = composite(texture)
    texture.levels[0].sub_(flat - flat.clamp(0.0, 1.0))


def sample_levels(levels: list[torch.Tensor], uv: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear samples of each level at ``uv`` (H, W, 2) -> (3, H, W).

    uv maps to each level's grid with half-texel centering; coordinates past
    the outermost texel centers are clamped to the edge.
    """
    grid = (uv * 2.0 - 1.0)[None].to(levels[0].dtype)
    out = None
    for lvl in levels:
        s = F.grid_sample(lvl[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]
        out = s if out is None else out + s
    return out


def sample(texture: LaplacianTexture, gbuffer: GBuffer) -> tuple[torch.Tensor, torch.Tensor]:
    """Render (3, H, W) colors for a g-buffer; uncovered pixels are zero."""
    uv = torch.from_numpy(np.ascontiguousarray(gbuffer.uv))
    coverage = torch.from_numpy(np.ascontiguousarray(gbuffer.coverage))
    image = sample_levels(texture.levels, uv)
    return image * coverage.to(image.dtype), coverage


def reg_loss(texture: LaplacianTexture) -> torch.Tensor:
    """Mean squared texel value summed over the detail levels; the base is free."""
    total = texture.levels[0].new_zeros(())
    for lvl in texture.levels[:-1]:
        total = total + lvl.pow(2).mean()
    return total


def export_texture(texture: LaplacianTexture, path: str | Path, config: Config | None = None) -> Path:
    """Write the clamped composite as a 16-bit PNG plus a JSON sidecar."""
    from scenestyle.scene_io import write_rgb

    path = Path(path)
    flat = composite(texture, clamp=True).detach().cpu().numpy().transpose(1, 2, 0)
    write_rgb(path, flat, bits=16)
    meta = {
        "resolution": texture.resolution,
        "levels": texture.num_levels,
        "config_hash": config.hash() if config is not None else None,
        "content_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
