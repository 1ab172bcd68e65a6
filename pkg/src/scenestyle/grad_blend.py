"""Per-pixel gradient scaling before backpropagation into the texture.

Every pixel feeds the loss parts of its two nearest pyramid levels. The two
image-space gradients are mixed with the depth blend weight and scaled by the
cosine of the normal-to-view angle, so the hard part boundaries do not show
up as seams in the texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenestyle.stylization import DepthLevelAssignment, blend_weights


@dataclass(eq=False)
class PixelGradientPair:
    g1: object  # gradient of the nearest-level loss term, (3, H, W)
    g2: object  # gradient of the second-nearest term


def angle_weight(cos_angle: np.ndarray, coverage: np.ndarray | None = None) -> np.ndarray:
    w = np.clip(np.asarray(cos_angle, dtype=np.float64), 0.0, 1.0)
    if coverage is not None:
        w = np.where(coverage, w, 0.0)
    return w


def depth_blend_weight(assignment: DepthLevelAssignment, level: int, mode: str = "nearest_dominant") -> np.ndarray:
    """Weight of the nearest level at each pixel of pyramid level ``level``."""
    if mode == "nearest_dominant":
        return assignment.blend[level]
    if mode == "strict":
        return blend_weights(assignment.R[level], assignment.nearest[level], assignment.second[level],
                             assignment.heights, strict=True)
    raise ValueError(f"unknown blend mode {mode!r}")


def blend_gradients(pair: PixelGradientPair, w_d, w_a):
    """``g1 * w_d * w_a + g2 * (1 - w_d) * w_a``; weights broadcast over channels."""
    return pair.g1 * (w_d * w_a) + pair.g2 * ((1 - w_d) * w_a)
