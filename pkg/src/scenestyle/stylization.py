"""Depth-level render parts, angle filtering and the part-based losses.

Each pose is rendered at several heights. Every covered pixel gets an optimal
render height ``R = theta_min * depth / theta_d``; the pyramid level whose
height is closest to ``R`` owns the pixel. Content and style losses are then
evaluated separately per level on that level's pixels, with the fine style
term further restricted to pixels seen at a good angle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from scenestyle.config import Config
from scenestyle.features import (
    CONTENT_TAP,
    DEEPEST_STYLE_TAP,
    STYLE_TAPS,
    FeatureExtractor,
    GramMatrix,
    downsample_mask,
    extract_features,
    masked_gram,
)
from scenestyle.rasterizer import GBuffer, RenderPyramid

log = logging.getLogger(__name__)


class NoVisibleGeometry(ValueError):
    """The pose sees no geometry usable for any depth level."""


@dataclass(eq=False)
class DepthLevelAssignment:
    """Per-level maps, each at the resolution of its pyramid level."""

    heights: list[int]
    R: list[np.ndarray]
    nearest: list[np.ndarray]  # int, -1 where uncovered
    second: list[np.ndarray]
    blend: list[np.ndarray]  # weight toward the nearest level
    coverage: list[np.ndarray]

    @property
    def num_levels(self) -> int:
        return len(self.heights)

    @property
    def level_masks(self) -> list[np.ndarray]:
        """Pixels of level ``l`` owned by level ``l`` (at level ``l``'s resolution)."""
        return [self.coverage[l] & (self.nearest[l] == l) for l in range(self.num_levels)]

    @property
    def second_masks(self) -> list[np.ndarray]:
        """Pixels of level ``l`` for which ``l`` is the second-nearest level."""
        return [self.coverage[l] & (self.second[l] == l) & (self.nearest[l] != l)
                for l in range(self.num_levels)]


def optimal_height(depth: np.ndarray, theta_min: float, theta_d: float) -> np.ndarray:
    return theta_min * np.asarray(depth, dtype=np.float64) / theta_d


def nearest_levels(R: np.ndarray, heights) -> np.ndarray:
    """Index of the closest height; exact ties go to the lower resolution."""
    h = np.asarray(heights, dtype=np.float64)
    return np.argmin(np.abs(R[..., None] - h), axis=-1)


def erode_levels(index: np.ndarray, coverage: np.ndarray, sentinel: int) -> np.ndarray:
    """3x3 minimum filter over level indices; uncovered pixels do not participate."""
    padded = np.where(coverage, index, sentinel)
    eroded = ndimage.minimum_filter(padded, size=3, mode="nearest")
    return np.where(coverage, eroded, -1)


def second_levels(R: np.ndarray, nearest: np.ndarray, heights) -> np.ndarray:
    """Neighbor of ``nearest`` on the side of ``R``, mirrored at the pyramid ends."""
    h = np.asarray(heights, dtype=np.float64)
    n = len(h)
    if n == 1:
        return nearest.copy()
    safe = np.clip(nearest, 0, n - 1)
    above = R >= h[safe]
    second = np.where(above, safe + 1, safe - 1)
    second = np.where(second >= n, n - 2, second)
    second = np.where(second < 0, 1, second)
    return np.where(nearest < 0, -1, second)


def blend_weights(R, nearest, second, heights, strict: bool = False) -> np.ndarray:
    """Weight of the nearest level in the two-level gradient blend.

    ``strict=False``: ``1 - |R - L1| / |L1 - L2|``, which is 1 at a level
    height and 0.5 halfway between two levels; pixels outside the pyramid's
    height range get 1. ``strict=True``: the distance ratio
    ``|R - L1| / |L1 - L2|`` itself, used as the nearest-level weight.
    Both are clamped to [0, 1].
    """
    h = np.asarray(heights, dtype=np.float64)
    valid = nearest >= 0
    if len(h) == 1:
        return np.where(valid, 0.0 if strict else 1.0, 0.0)
    l1 = h[np.clip(nearest, 0, len(h) - 1)]
    l2 = h[np.clip(second, 0, len(h) - 1)]
    gap = np.abs(l1 - l2)
    ratio = np.abs(R - l1) / np.where(gap > 0, gap, 1.0)  # gap is 0 only on invalid pixels
    outside = (R <= h[0]) | (R >= h[-1])
    if strict:
        w = np.where(outside, 0.0, np.clip(ratio, 0.0, 1.0))
    else:
        w = np.where(outside, 1.0, np.clip(1.0 - ratio, 0.0, 1.0))
    return np.where(valid, w, 0.0)


def assign_levels(gbuffer: GBuffer, heights, config: Config) -> tuple[np.ndarray, ...]:
    """R, nearest, second, blend and coverage maps for one g-buffer."""
    coverage = gbuffer.coverage & (gbuffer.depth > 0)
    R = np.where(coverage, optimal_height(gbuffer.depth, config.theta_min, config.theta_d), 0.0)
    nearest = np.where(coverage, nearest_levels(R, heights), -1)
    if config.erode_levels and len(heights) > 1:
        nearest = erode_levels(nearest, coverage, sentinel=len(heights))
    second = second_levels(R, nearest, heights)
    blend = blend_weights(R, nearest, second, heights)
    return R, nearest, second, blend, coverage


def compute_depth_levels(pyramid: RenderPyramid, config: Config) -> DepthLevelAssignment:
    heights = list(pyramid.heights)
    out = [assign_levels(gb, heights, config) for gb in pyramid.levels]
    R, nearest, second, blend, coverage = (list(x) for x in zip(*out)) if out else ([],) * 5
    return DepthLevelAssignment(heights, R, nearest, second, blend, coverage)


def mean_depth_level(assignment: DepthLevelAssignment, level: int = -1) -> float:
    """Mean assigned level index over covered pixels of one pyramid level."""
    nearest = assignment.nearest[level]
    cov = assignment.coverage[level]
    return float(nearest[cov].mean()) if cov.any() else float("nan")


def angle_mask(gbuffer: GBuffer, theta_a: float) -> np.ndarray:
    """Covered pixels whose normal-to-view angle is at most ``theta_a`` degrees."""
    # float32 cosines: tolerate rounding at the threshold
    threshold = math.cos(math.radians(theta_a)) - 1e-7
    return gbuffer.coverage & (gbuffer.cos_angle >= threshold)


# -- style targets -------------------------------------------------------------------


@dataclass(eq=False)
class StyleTargets:
    coarse: dict[str, GramMatrix]
    fine: dict[str, GramMatrix]
    coarse_image: torch.Tensor
    fine_image: torch.Tensor
    warnings: list[str] = field(default_factory=list)


def _as_chw(image, dtype=torch.float32) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
        if t.dim() == 3 and t.shape[0] != 3 and t.shape[-1] == 3:
            t = t.permute(2, 0, 1)
        return t.to(dtype)
    arr = np.asarray(image, dtype=np.float64)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(dtype)


def halve(image: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(image[None], 2)[0]


def style_scales(height: int, width: int, min_size: int = 256) -> tuple[int, int]:
    """Number of halvings for the fine and coarse style images.

    The fine image is halved while the next halving keeps the smaller side at
    or above ``min_size``; the coarse image uses two halvings fewer.
    """
    n = 0
    side = min(height, width)
    while side // 2 >= min_size:
        side //= 2
        n += 1
    return n, max(0, n - 2)


def build_style_targets(style_image, extractor: FeatureExtractor, min_size: int = 256,
                        dtype=torch.float32) -> StyleTargets:
    image = _as_chw(style_image, dtype)
    h, w = image.shape[-2:]
    warnings = []
    if min(h, w) < min_size:
        msg = f"style image {w}x{h} is smaller than {min_size} px; used without halving"
        log.warning(msg)
        warnings.append(msg)
    n_fine, n_coarse = style_scales(h, w, min_size)
    fine = image
    for _ in range(n_fine):
        fine = halve(fine)
    coarse = image
    for _ in range(n_coarse):
        coarse = halve(coarse)
    with torch.no_grad():
        grams = []
        for img in (coarse, fine):
            feats = extract_features(img, extractor)
            grams.append({t: masked_gram(feats[t], np.ones(feats[t].shape[-2:], bool)) for t in STYLE_TAPS})
    return StyleTargets(grams[0], grams[1], coarse, fine, warnings)


# -- level weights -------------------------------------------------------------------


@dataclass
class LevelWeights:
    w_hat: np.ndarray
    raw: np.ndarray  # v_l / t_l before renormalization
    skipped: list[int]


def deepest_tap_count(mask: np.ndarray) -> int:
    stride = FeatureExtractor.tap_strides[DEEPEST_STYLE_TAP]
    h, w = mask.shape
    if h < stride or w < stride:
        return 0
    return int(downsample_mask(mask, (h // stride, w // stride)).sum())


def level_weights(assignment: DepthLevelAssignment, min_positions: int = 16,
                  masks: list[np.ndarray] | None = None, allow_empty: bool = False) -> LevelWeights:
    """Visible fraction per level, renormalized to sum to one.

    Levels whose mask keeps fewer than ``min_positions`` positions at the
    deepest style tap are skipped (weight 0) before renormalization.
    """
    masks = assignment.level_masks if masks is None else masks
    raw = np.array([m.sum() / m.size for m in masks], dtype=np.float64)
    skipped = [l for l, m in enumerate(masks) if m.any() and deepest_tap_count(m) < min_positions]
    w = raw.copy()
    w[skipped] = 0.0
    total = w.sum()
    if total <= 0:
        if allow_empty:
            return LevelWeights(np.zeros_like(w), raw, skipped)
        raise NoVisibleGeometry("no depth level has enough visible pixels for this pose")
    return LevelWeights(w / total, raw, skipped)


# -- part-based losses ---------------------------------------------------------------


@dataclass(eq=False)
class TapMasks:
    """Level masks downsampled to every tap resolution."""

    coarse: list[dict[str, torch.Tensor]]
    fine: list[dict[str, torch.Tensor]]


def tap_shape(shape: tuple[int, int], tap: str) -> tuple[int, int]:
    s = FeatureExtractor.tap_strides[tap]
    return shape[0] // s, shape[1] // s


def make_tap_masks(masks: list[np.ndarray], angle_masks: list[np.ndarray] | None) -> TapMasks:
    coarse, fine = [], []
    for l, m in enumerate(masks):
        fm = m if angle_masks is None else m & angle_masks[l]
        taps = STYLE_TAPS + (CONTENT_TAP,)
        coarse.append({t: torch.from_numpy(downsample_mask(m, tap_shape(m.shape, t))) for t in taps})
        fine.append({t: torch.from_numpy(downsample_mask(fm, tap_shape(m.shape, t))) for t in STYLE_TAPS})
    return TapMasks(coarse, fine)


def _gram_distance(target: GramMatrix, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor | None:
    if not bool(mask.any()):
        return None
    g = masked_gram(feats, mask)
    return (target.matrix.to(g.matrix.dtype) - g.matrix).pow(2).sum()


def style_terms(level_feats: list[dict[str, torch.Tensor] | None], tap_masks: TapMasks,
                targets: StyleTargets, w_hat) -> torch.Tensor:
    """Weighted sum over levels and style taps of coarse and fine Gram distances.

    A tap term whose mask keeps no position is left out instead of pulling
    an empty Gram matrix toward the target.
    """
    total = None
    for l, feats in enumerate(level_feats):
        if w_hat[l] == 0 or feats is None:
            continue
        for tap in STYLE_TAPS:
            for target, masks in ((targets.coarse, tap_masks.coarse), (targets.fine, tap_masks.fine)):
                d = _gram_distance(target[tap], feats[tap], masks[l][tap])
                if d is not None:
                    total = w_hat[l] * d if total is None else total + w_hat[l] * d
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


def content_terms(level_feats, content_feats, tap_masks: TapMasks, w_hat) -> torch.Tensor:
    total = None
    for l, feats in enumerate(level_feats):
        if w_hat[l] == 0 or feats is None:
            continue
        mask = tap_masks.coarse[l][CONTENT_TAP]
        m = int(mask.sum())
        if m == 0:
            continue
        c = feats[CONTENT_TAP].shape[0]
        diff = feats[CONTENT_TAP].reshape(c, -1)[:, mask.reshape(-1)] - \
            content_feats[l].reshape(c, -1)[:, mask.reshape(-1)]
        term = w_hat[l] * diff.pow(2).sum() / m
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


def resize_content(frame_rgb, shape: tuple[int, int], dtype=torch.float32) -> torch.Tensor:
    img = _as_chw(frame_rgb, dtype)
    if tuple(img.shape[-2:]) == tuple(shape):
        return img
    return F.interpolate(img[None], size=shape, mode="bilinear", align_corners=False)[0]


def content_features(frame_rgb, shapes, extractor: FeatureExtractor, dtype=torch.float32) -> list[torch.Tensor]:
    with torch.no_grad():
        return [extract_features(resize_content(frame_rgb, s, dtype), extractor)[CONTENT_TAP] for s in shapes]


def style_loss(pyramid_images: list[torch.Tensor], assignment: DepthLevelAssignment,
               angle_masks: list[np.ndarray] | None, targets: StyleTargets, w_hat,
               extractor: FeatureExtractor, masks: list[np.ndarray] | None = None) -> torch.Tensor:
    masks = assignment.level_masks if masks is None else masks
    tm = make_tap_masks(masks, angle_masks)
    feats = [extract_features(img, extractor) if w_hat[l] else None for l, img in enumerate(pyramid_images)]
    return style_terms(feats, tm, targets, w_hat)


def content_loss(pyramid_images: list[torch.Tensor], content_frame, assignment: DepthLevelAssignment,
                 w_hat, extractor: FeatureExtractor, masks: list[np.ndarray] | None = None) -> torch.Tensor:
    masks = assignment.level_masks if masks is None else masks
    tm = make_tap_masks(masks, None)
    dtype = pyramid_images[0].dtype
    shapes = [tuple(img.shape[-2:]) for img in pyramid_images]
    cf = content_features(content_frame, shapes, extractor, dtype)
    feats = [extract_features(img, extractor) if w_hat[l] else None for l, img in enumerate(pyramid_images)]
    return content_terms(feats, cf, tm, w_hat)
