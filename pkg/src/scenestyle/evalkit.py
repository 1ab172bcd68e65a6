"""View-consistency and 3D-awareness metrics.

Reprojection error warps a later frame of a rendered trajectory into an
earlier one with depth and poses and takes the mean L1 color difference over
pixels visible in both. The circle metrics segment red ellipses from renders
of a scene stylized with a red-circles image and relate their size and
stretch to depth, in screen space and lifted to world space.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from scenestyle.rasterizer import GBuffer
from scenestyle.scene_io import CameraIntrinsics, Frame, Scene

DEPTH_TOLERANCE = 0.05

# HSV keep ranges for red, hue in [0, 1]
SV_RANGE = (0.6, 1.0)
HUE_RANGES = ((0.0, 0.08), (0.88, 1.0))
BINARY_THRESHOLD = 0.15
MAX_CONVEXITY_DEFECT = 2.0
MIN_CONTOUR_POINTS = 6
RADIUS_RANGE = (10.0, 1000.0)
MAX_STRETCH = 10.0
# patch-similarity denoiser settings (filter strength, template and search windows)
DENOISE_H = 10.0
DENOISE_TEMPLATE = 7
DENOISE_SEARCH = 21


# -- reprojection --------------------------------------------------------------------


def backproject(u: np.ndarray, v: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Camera-space points for continuous pixel coordinates (pixel centers at +0.5)."""
    return np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)


def to_world(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return points @ pose[:3, :3].T + pose[:3, 3]


def to_camera(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return (points - pose[:3, 3]) @ pose[:3, :3]


def reproject(target: Frame, source: Frame, intrinsics: CameraIntrinsics,
              depth_tolerance: float = DEPTH_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``target``'s colors into ``source``'s view.

    Every source pixel is lifted with the source depth, projected into the
    target camera and the target image is sampled bilinearly there. A pixel is
    valid when both depths exist, the projection lands inside the target
    image and the projected depth agrees with the target depth map within
    ``depth_tolerance`` meters (occlusion test).
    """
    h, w = source.depth.shape
    k = intrinsics if intrinsics.height == h else intrinsics.scaled(h)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d_src = source.depth.astype(np.float64)
    pts = to_camera(to_world(backproject(xs + 0.5, ys + 0.5, d_src, k), source.pose), target.pose)
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pts[..., 0] / z + k.cx
        v = k.fy * pts[..., 1] / z + k.cy
    valid = (d_src > 0) & (z > 0) & np.isfinite(u) & np.isfinite(v)
    valid &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    ui = np.clip(np.floor(np.where(valid, u, 0)), 0, w - 1).astype(np.int64)
    vi = np.clip(np.floor(np.where(valid, v, 0)), 0, h - 1).astype(np.int64)
    d_tgt = target.depth.astype(np.float64)[vi, ui]
    valid &= (d_tgt > 0) & (np.abs(d_tgt - z) <= depth_tolerance)
    map_x = np.where(valid, u - 0.5, -1).astype(np.float32)
    map_y = np.where(valid, v - 0.5, -1).astype(np.float32)
    warped = cv2.remap(target.rgb.astype(np.float32), map_x, map_y, cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_REPLICATE)
    warped[~valid] = 0.0
    return warped, valid


@dataclass
class ConsistencyReport:
    pairs: list[dict] = field(default_factory=list)  # {offset, source, target, l1, valid_fraction}
    means: dict[int, float] = field(default_factory=dict)

    @property
    def short_range(self) -> float:
        return self.means.get(2, float("nan"))

    @property
    def long_range(self) -> float:
        return self.means.get(20, float("nan"))

    def to_records(self) -> list[dict]:
        return self.pairs + [{"offset": k, "mean_l1": v} for k, v in sorted(self.means.items())]


def reprojection_error(rendered_frames, scene: Scene, offsets=(2, 20),
                       depth_tolerance: float = DEPTH_TOLERANCE) -> ConsistencyReport:
    """Mean L1 in [0, 1] color units between each frame and its warped successor."""
    frames = scene.frames
    if len(rendered_frames) != len(frames):
        raise ValueError("rendered trajectory and scene frames differ in length")
    report = ConsistencyReport()
    for off in offsets:
        values = []
        for s in range(len(frames) - off):
            t = s + off
            src = Frame(frames[s].id, np.asarray(rendered_frames[s], np.float32), frames[s].depth, frames[s].pose)
            tgt = Frame(frames[t].id, np.asarray(rendered_frames[t], np.float32), frames[t].depth, frames[t].pose)
            warped, valid = reproject(tgt, src, scene.intrinsics, depth_tolerance)
            if not valid.any():
                continue
            l1 = float(np.abs(src.rgb[valid] - warped[valid]).mean())
            values.append(l1)
            report.pairs.append({"offset": off, "source": src.id, "target": tgt.id, "l1": l1,
                                 "valid_fraction": float(valid.mean())})
        if values:
            report.means[off] = float(np.mean(values))
    return report


# -- ellipse segmentation ------------------------------------------------------------


@dataclass
class EllipseRecord:
    center: tuple[float, float]  # continuous pixel coordinates
    h_p: float
    v_p: float
    angle: float  # degrees, direction of the horizontal-ish axis
    frame: int | None = None
    h_w: float | None = None
    v_w: float | None = None
    center_depth: float | None = None

    @property
    def r_p(self) -> float:
        return (self.h_p + self.v_p) / 2

    @property
    def s_p(self) -> float:
        return max(self.h_p / self.v_p, self.v_p / self.h_p)

    @property
    def r_w(self) -> float | None:
        return None if self.h_w is None else (self.h_w + self.v_w) / 2

    @property
    def s_w(self) -> float | None:
        return None if self.h_w is None else max(self.h_w / self.v_w, self.v_w / self.h_w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(r_p=self.r_p, s_p=self.s_p, r_w=self.r_w, s_w=self.s_w)
        return d


def red_mask(image: np.ndarray) -> np.ndarray:
    hsv = cv2.cvtColor(np.clip(image, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
    hue, sat, val = hsv[..., 0] / 360.0, hsv[..., 1], hsv[..., 2]
    keep = (sat >= SV_RANGE[0]) & (sat <= SV_RANGE[1]) & (val >= SV_RANGE[0]) & (val <= SV_RANGE[1])
    hue_ok = np.zeros_like(keep)
    for lo, hi in HUE_RANGES:
        hue_ok |= (hue >= lo) & (hue <= hi)
    return keep & hue_ok


def binary_red(image: np.ndarray) -> np.ndarray:
    """HSV gate, intensity threshold and denoising; uint8 mask with 0/255."""
    image = np.asarray(image, dtype=np.float32)
    filtered = np.where(red_mask(image)[..., None], image, 0.0)
    intensity = filtered @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    binary = np.where(intensity > BINARY_THRESHOLD, 255, 0).astype(np.uint8)
    denoised = cv2.fastNlMeansDenoising(binary, None, DENOISE_H, DENOISE_TEMPLATE, DENOISE_SEARCH)
    return np.where(denoised >= 128, 255, 0).astype(np.uint8)


def max_convexity_defect(contour: np.ndarray) -> float:
    hull = cv2.convexHull(contour, returnPoints=False)
    if hull is None or len(hull) < 3:
        return 0.0
    try:
        defects = cv2.convexityDefects(contour, np.sort(hull, axis=0))
    except cv2.error:
        return float("inf")
    if defects is None:
        return 0.0
    return float(np.asarray(defects).reshape(-1, 4)[:, 3].max()) / 256.0


def segment_ellipses(image: np.ndarray, frame: int | None = None) -> list[EllipseRecord]:
    binary = binary_red(image)
    contours, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    records = []
    for c in contours:
        if len(c) < MIN_CONTOUR_POINTS:
            continue
        if max_convexity_defect(c) > MAX_CONVEXITY_DEFECT:
            continue
        (cx, cy), (ax1, ax2), angle = cv2.fitEllipseDirect(c.astype(np.float32))
        if not (np.isfinite([cx, cy, ax1, ax2]).all() and ax1 > 0 and ax2 > 0):
            continue
        # contour points are centers of the outermost mask pixels, half a pixel inside the edge
        r1, r2 = ax1 / 2 + 0.5, ax2 / 2 + 0.5
        a = math.radians(angle)
        if abs(math.cos(a)) >= abs(math.sin(a)):
            h_p, v_p, h_angle = r1, r2, angle
        else:
            h_p, v_p, h_angle = r2, r1, angle + 90.0
        rec = EllipseRecord((cx + 0.5, cy + 0.5), h_p, v_p, h_angle % 180.0, frame)
        if RADIUS_RANGE[0] <= rec.r_p <= RADIUS_RANGE[1] and rec.s_p <= MAX_STRETCH:
            records.append(rec)
    return records


def lift_ellipses(records: list[EllipseRecord], gbuffer: GBuffer, pose: np.ndarray,
                  intrinsics: CameraIntrinsics, depth_mode: str = "surface") -> list[EllipseRecord]:
    """Add world-space half-axis lengths to each record.

    Axis endpoints are lifted with the g-buffer depth under each endpoint
    (``depth_mode="surface"``), falling back to the center depth where an
    endpoint is uncovered; ``depth_mode="center"`` lifts all points at the
    center depth. Records centered on uncovered pixels are dropped.
    """
    h, w = gbuffer.shape
    k = intrinsics if intrinsics.height == h else intrinsics.scaled(h)
    pose = np.asarray(pose, dtype=np.float64)

    def depth_at(x, y):
        j, i = int(math.floor(x)), int(math.floor(y))
        if 0 <= i < h and 0 <= j < w and gbuffer.coverage[i, j] and gbuffer.depth[i, j] > 0:
            return float(gbuffer.depth[i, j])
        return None

    out = []
    for rec in records:
        cx, cy = rec.center
        d0 = depth_at(cx, cy)
        if d0 is None:
            continue
        center = to_world(backproject(np.array(cx), np.array(cy), np.array(d0), k), pose)
        lengths = []
        for radius, angle in ((rec.h_p, rec.angle), (rec.v_p, rec.angle + 90.0)):
            a = math.radians(angle)
            dx, dy = math.cos(a) * radius, math.sin(a) * radius
            dists = []
            for sign in (1.0, -1.0):
                ex, ey = cx + sign * dx, cy + sign * dy
                d = depth_at(ex, ey) if depth_mode == "surface" else None
                p = to_world(backproject(np.array(ex), np.array(ey), np.array(d if d else d0), k), pose)
                dists.append(float(np.linalg.norm(p - center)))
            lengths.append(sum(dists) / 2)
        out.append(EllipseRecord(rec.center, rec.h_p, rec.v_p, rec.angle, rec.frame,
                                 lengths[0], lengths[1], d0))
    return out


# -- correlation metrics -------------------------------------------------------------


def pearson(x, y) -> tuple[float, bool]:
    """Pearson correlation and a degenerate flag (zero variance gives 0.0)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return 0.0, True
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    scale = max(1.0, float(np.abs(x).max()) ** 2, float(np.abs(y).max()) ** 2) * len(x)
    if sxx <= 1e-24 * scale or syy <= 1e-24 * scale:
        return 0.0, True
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


@dataclass
class AwarenessReport:
    corr_2d: float
    corr_3d: float
    stretch: float
    count: int
    degenerate_2d: bool = False
    degenerate_3d: bool = False
    low_confidence: bool = False

    @property
    def corr_2d_magnitude(self) -> float:
        return abs(self.corr_2d)

    @property
    def corr_3d_magnitude(self) -> float:
        return abs(self.corr_3d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(corr_2d_magnitude=self.corr_2d_magnitude, corr_3d_magnitude=self.corr_3d_magnitude)
        return d


MIN_CONFIDENT_RECORDS = 8


def awareness_metrics(records: list[EllipseRecord]) -> AwarenessReport:
    lifted = [r for r in records if r.center_depth is not None and r.h_w is not None]
    depth = [r.center_depth for r in lifted]
    c2, deg2 = pearson(depth, [r.r_p for r in lifted])
    c3, deg3 = pearson(depth, [r.r_w for r in lifted])
    stretch = float(np.mean([r.s_w for r in lifted])) if lifted else float("nan")
    return AwarenessReport(c2, c3, stretch, len(lifted), deg2, deg3, len(lifted) < MIN_CONFIDENT_RECORDS)


# -- report output -------------------------------------------------------------------


def write_jsonl(path: str | Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def summary_table(rows: dict[str, dict]) -> str:
    """Plain-text table with one row per method or ablation mode."""
    lines = []
    rep_rows = {k: v for k, v in rows.items() if "short_range" in v}
    if rep_rows:
        lines += ["| Method | Short-Range | Long-Range |", "|---|---|---|"]
        for name, r in rep_rows.items():
            lines.append(f"| {name} | {r['short_range']:.4f} | {r['long_range']:.4f} |")
    aw_rows = {k: v for k, v in rows.items() if "corr_2d" in v}
    if aw_rows:
        if lines:
            lines.append("")
        lines += ["| Method | Corr. 2D | Corr. 3D | Stretch | Ellipses |", "|---|---|---|---|---|"]
        for name, r in aw_rows.items():
            lines.append(f"| {name} | {abs(r['corr_2d']):.3f} | {abs(r['corr_3d']):.3f} | "
                         f"{r['stretch']:.3f} | {r['count']} |")
    return "\n".join(lines) + "\n"
