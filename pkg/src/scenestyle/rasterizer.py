"""Deterministic software rasterization of textured meshes.

Triangles are clipped against the camera near plane, projected with the
pinhole model and scan-converted over their pixel bounding box. Pixel centers
sit at (x + 0.5, y + 0.5); edge ties follow the top-left fill rule so that
shared edges are drawn exactly once. Attributes are interpolated with
perspective-correct barycentrics and resolved with a strict-less z-test, so
for equal depths the first face in mesh order wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scenestyle.config import Config
from scenestyle.container import read_container, write_container
from scenestyle.scene_io import CameraIntrinsics, TexturedMesh

NEAR = 1e-3
_AREA_EPS = 1e-12

GBUFFER_CHANNELS = ("u", "v", "depth", "cos_angle", "coverage")


@dataclass(eq=False)
class GBuffer:
    uv: np.ndarray  # (H, W, 2) float32
    depth: np.ndarray  # (H, W) float32, meters along the optical axis
    cos_angle: np.ndarray  # (H, W) float32 in [0, 1]
    coverage: np.ndarray  # (H, W) bool
    face_id: np.ndarray | None = None  # (H, W) int32, -1 where uncovered
    uv_dx: np.ndarray | None = None  # (H, W, 2) uv change per pixel step in x
    uv_dy: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def save(self, path: str | Path) -> None:
        write_container(path, {
            "u": self.uv[..., 0], "v": self.uv[..., 1], "depth": self.depth,
            "cos_angle": self.cos_angle, "coverage": self.coverage.astype(np.float32),
        })

    @classmethod
    def load(cls, path: str | Path) -> "GBuffer":
        p = read_container(path)
        missing = set(GBUFFER_CHANNELS) - set(p)
        if missing:
            raise ValueError(f"{path}: missing g-buffer channels {sorted(missing)}")
        uv = np.stack([p["u"], p["v"]], axis=-1)
        return cls(uv, p["depth"], p["cos_angle"], p["coverage"] > 0.5)


@dataclass(eq=False)
class RenderPyramid:
    levels: list[GBuffer]
    heights: list[int]

    def __len__(self) -> int:
        return len(self.levels)


def _clip_near(cam: np.ndarray, attrs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sutherland-Hodgman clip of one polygon against z >= NEAR."""
    out_p, out_a = [], []
    n = len(cam)
    for i in range(n):
        p, q = cam[i], cam[(i + 1) % n]
        a, b = attrs[i], attrs[(i + 1) % n]
        p_in, q_in = p[2] >= NEAR, q[2] >= NEAR
        if p_in:
            out_p.append(p)
            out_a.append(a)
        if p_in != q_in:
            t = (NEAR - p[2]) / (q[2] - p[2])
            out_p.append(p + t * (q - p))
            out_a.append(a + t * (b - a))
    return np.array(out_p), np.array(out_a)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _shared_edge(ax, ay, bx, by, px, py):
    # endpoints in canonical order so both triangles sharing an edge get exactly
    # negated values; otherwise rounding can leave pixel centers on the edge uncovered
    if (ax, ay) > (bx, by):
        return -_edge(bx, by, ax, ay, px, py)
    return _edge(ax, ay, bx, by, px, py)


def _is_top_left(ax, ay, bx, by) -> bool:
    dx, dy = bx - ax, by - ay
    return (dy == 0 and dx > 0) or dy < 0


def rasterize_gbuffer(
    mesh: TexturedMesh,
    pose: np.ndarray,
    intrinsics: CameraIntrinsics,
    height: int,
    view_direction: str = "per_pixel",
    derivatives: bool = False,
) -> GBuffer:
    """Rasterize uv, depth, normal-to-view cosine and coverage for one pose.

    The image width follows the intrinsics' aspect ratio and the intrinsics
    are rescaled to the requested height. Fragments whose interpolated normal
    faces away from the camera are culled.
    """
    if height <= 0:
        raise ValueError("height must be positive")
    k = intrinsics.scaled(height)
    h, w = k.height, k.width
    pose = np.asarray(pose, dtype=np.float64)
    rot, center = pose[:3, :3], pose[:3, 3]
    axis_dir = -rot[:, 2]

    zbuf = np.full((h, w), np.inf)
    uv_buf = np.zeros((h, w, 2))
    cos_buf = np.zeros((h, w))
    face_buf = np.full((h, w), -1, dtype=np.int32)
    dx_buf = np.zeros((h, w, 2)) if derivatives else None
    dy_buf = np.zeros((h, w, 2)) if derivatives else None

    if mesh.num_faces:
        cam_all = (mesh.vertices - center) @ rot
    for fi in range(mesh.num_faces):
        face = mesh.faces[fi]
        cam = cam_all[face]
        if (cam[:, 2] < NEAR).all():
            continue
        # per-corner attributes: uv (2) + world normal (3)
        attrs = np.concatenate([mesh.uvs[fi], mesh.normals[face]], axis=1)
        if (cam[:, 2] < NEAR).any():
            cam, attrs = _clip_near(cam, attrs)
        for t in range(1, len(cam) - 1):
            tri = [0, t, t + 1]
            _raster_triangle(
                cam[tri], attrs[tri], fi, k, rot, center, axis_dir, view_direction,
                zbuf, uv_buf, cos_buf, face_buf, dx_buf, dy_buf,
            )

    coverage = face_buf >= 0
    depth = np.where(coverage, zbuf, 0.0)
    return GBuffer(
        uv=uv_buf.astype(np.float32),
        depth=depth.astype(np.float32),
        cos_angle=cos_buf.astype(np.float32),
        coverage=coverage,
        face_id=face_buf,
        uv_dx=None if dx_buf is None else dx_buf.astype(np.float32),
        uv_dy=None if dy_buf is None else dy_buf.astype(np.float32),
    )


def _raster_triangle(cam, attrs, fi, k, rot, center, axis_dir, view_direction,
                     zbuf, uv_buf, cos_buf, face_buf, dx_buf, dy_buf):
    h, w = zbuf.shape
    z = cam[:, 2]
    sx = k.fx * cam[:, 0] / z + k.cx
    sy = k.fy * cam[:, 1] / z + k.cy
    area = _edge(sx[0], sy[0], sx[1], sy[1], sx[2], sy[2])
    if abs(area) < _AREA_EPS:
        return
    if area < 0:
        order = [0, 2, 1]
        cam, attrs, z, sx, sy = cam[order], attrs[order], z[order], sx[order], sy[order]
        area = -area

    x0 = max(int(np.ceil(sx.min() - 0.5)), 0)
    x1 = min(int(np.floor(sx.max() - 0.5)), w - 1)
    y0 = max(int(np.ceil(sy.min() - 0.5)), 0)
    y1 = min(int(np.floor(sy.max() - 0.5)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)

    inside = np.ones(px.shape, dtype=bool)
    ws = []
    for a, b in ((1, 2), (2, 0), (0, 1)):
        e = _shared_edge(sx[a], sy[a], sx[b], sy[b], px, py)
        if _is_top_left(sx[a], sy[a], sx[b], sy[b]):
            inside &= e >= 0
        else:
            inside &= e > 0
        ws.append(e)
    if not inside.any():
        return
    iy, ix = np.nonzero(inside)
    bary = np.stack([wi[iy, ix] for wi in ws], axis=1) / area  # (n, 3)

    inv_z = 1.0 / z
    persp = bary * inv_z
    depth = 1.0 / persp.sum(axis=1)
    weights = persp * depth[:, None]
    att = weights @ attrs  # (n, 5)

    gy, gx = iy + y0, ix + x0
    closer = depth < zbuf[gy, gx]
    if not closer.any():
        return
    normal = att[:, 2:5]
    normal = normal / np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
    if view_direction == "camera_axis":
        view = np.broadcast_to(axis_dir, normal.shape)
    else:
        cam_pt = weights @ cam
        world_pt = cam_pt @ rot.T + center
        view = center - world_pt
        view = view / np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    cos = np.einsum("ij,ij->i", normal, view)
    keep = closer & (cos >= 0.0)
    if not keep.any():
        return
    gy, gx = gy[keep], gx[keep]
    zbuf[gy, gx] = depth[keep]
    uv_buf[gy, gx] = att[keep, :2]
    cos_buf[gy, gx] = np.minimum(cos[keep], 1.0)
    face_buf[gy, gx] = fi

    if dx_buf is not None:
        # uv at the neighboring pixel centers of the same (extended) plane
        inv_area = 1.0 / area
        uvs = attrs[:, :2]
        base = _persp_uv(bary[keep], inv_z, uvs)
        for buf, (ddx, ddy) in ((dx_buf, (1.0, 0.0)), (dy_buf, (0.0, 1.0))):
            step = np.array([
                (sy[1] - sy[2]) * ddx - (sx[1] - sx[2]) * ddy,
                (sy[2] - sy[0]) * ddx - (sx[2] - sx[0]) * ddy,
                (sy[0] - sy[1]) * ddx - (sx[0] - sx[1]) * ddy,
            ]) * inv_area
            buf[gy, gx] = _persp_uv(bary[keep] + step, inv_z, uvs) - base


def _persp_uv(bary, inv_z, uvs):
    p = bary * inv_z
    return (p @ uvs) / p.sum(axis=1, keepdims=True)


def build_render_pyramid(mesh: TexturedMesh, pose: np.ndarray, intrinsics: CameraIntrinsics,
                         config: Config, heights: list[int] | None = None) -> RenderPyramid:
    heights = list(config.pyramid_heights if heights is None else heights)
    levels = [rasterize_gbuffer(mesh, pose, intrinsics, hh, config.view_direction) for hh in heights]
    return RenderPyramid(levels, heights)


def save_pyramid(pyramid: RenderPyramid, directory: str | Path, frame_id: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for level, (gb, hh) in enumerate(zip(pyramid.levels, pyramid.heights)):
        path = directory / f"{frame_id}.level{level}.h{hh}.gbuf"
        gb.save(path)
        paths.append(path)
    return paths


def load_pyramid(directory: str | Path, frame_id: int, heights: list[int]) -> RenderPyramid:
    directory = Path(directory)
    levels = [GBuffer.load(directory / f"{frame_id}.level{level}.h{hh}.gbuf")
              for level, hh in enumerate(heights)]
    return RenderPyramid(levels, list(heights))


# -- textured rendering with mipmaps -----------------------------------------------


def build_mip_chain(texture: np.ndarray) -> list[np.ndarray]:
    """Successive 2x2 box downsampling; odd sizes are padded by edge replication."""
    chain = [np.asarray(texture, dtype=np.float64)]
    while max(chain[-1].shape[:2]) > 1:
        t = chain[-1]
        ph, pw = t.shape[0] % 2, t.shape[1] % 2
        if ph or pw:
            t = np.pad(t, ((0, ph), (0, pw), (0, 0)), mode="edge")
        hh, ww = t.shape[0] // 2, t.shape[1] // 2
        chain.append(t.reshape(hh, 2, ww, 2, -1).mean(axis=(1, 3)))
    return chain


def bilinear_lookup(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample with half-texel centering and edge clamping. uv: (n, 2)."""
    h, w = image.shape[:2]
    x = np.clip(uv[:, 0] * w - 0.5, 0.0, w - 1)
    y = np.clip(uv[:, 1] * h - 0.5, 0.0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def render_textured(mesh: TexturedMesh, texture_image: np.ndarray, pose: np.ndarray,
                    intrinsics: CameraIntrinsics, height: int,
                    background=(0.0, 0.0, 0.0), gbuffer: GBuffer | None = None) -> np.ndarray:
    """Render the mesh with a flat texture using trilinear mipmap filtering.

    The mip level comes from the larger screen-space uv footprint of the
    pixel, measured in base-level texels.
    """
    gb = gbuffer if gbuffer is not None and gbuffer.uv_dx is not None else \
        rasterize_gbuffer(mesh, pose, intrinsics, height, derivatives=True)
    chain = build_mip_chain(texture_image)
    th, tw = chain[0].shape[:2]
    out = np.empty(gb.depth.shape + (3,))
    out[:] = np.asarray(background, dtype=np.float64)
    iy, ix = np.nonzero(gb.coverage)
    if len(iy) == 0:
        return out.astype(np.float32)
    uv = gb.uv[iy, ix].astype(np.float64)
    dx = gb.uv_dx[iy, ix].astype(np.float64) * [tw, th]
    dy = gb.uv_dy[iy, ix].astype(np.float64) * [tw, th]
    rho = np.maximum(np.linalg.norm(dx, axis=1), np.linalg.norm(dy, axis=1))
    lod = np.clip(np.log2(np.maximum(rho, 1e-12)), 0.0, len(chain) - 1)
    lo = np.floor(lod).astype(np.int64)
    frac = lod - lo
    hi = np.minimum(lo + 1, len(chain) - 1)
    color = np.zeros((len(iy), chain[0].shape[2]))
    for level in np.unique(np.concatenate([lo, hi])):
        sel_lo = lo == level
        if sel_lo.any():
            color[sel_lo] += bilinear_lookup(chain[level], uv[sel_lo]) * (1 - frac[sel_lo, None])
        sel_hi = (hi == level) & (frac > 0)
        if sel_hi.any():
            color[sel_hi] += bilinear_lookup(chain[level], uv[sel_hi]) * frac[sel_hi, None]
    out[iy, ix] = color[:, :3]
    return out.astype(np.float32)
