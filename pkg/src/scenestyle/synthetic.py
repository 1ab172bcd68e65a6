"""Procedural scenes and images for tests, demos and desk-scale experiments.

Meshes are built from planar rectangles packed into one texture atlas with a
uniform texel density, so a circle in texture space is a circle on every
surface. ``per_triangle_atlas`` is the fallback for arbitrary meshes without
a parametrization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from scenestyle.rasterizer import rasterize_gbuffer, render_textured
from scenestyle.scene_io import CameraIntrinsics, Frame, Scene, TexturedMesh


@dataclass
class Rect:
    """Planar rectangle ``origin + s * edge_u + t * edge_v`` for s, t in [0, 1].

    The face normal is ``edge_v x edge_u``. With x right, y down and z forward,
    ``edge_u = +x`` and ``edge_v = +y`` give a normal toward -z, i.e. facing a
    camera that looks along +z.
    """

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    subdiv: tuple[int, int] = (1, 1)

    @property
    def size(self) -> tuple[float, float]:
        return float(np.linalg.norm(self.edge_u)), float(np.linalg.norm(self.edge_v))


def _shelf_pack(sizes, scale, gutter):
    """Place scaled rectangles on shelves inside the unit square; None if they do not fit."""
    order = sorted(range(len(sizes)), key=lambda i: -sizes[i][1])
    x = y = shelf_h = 0.0
    offsets = [None] * len(sizes)
    for i in order:
        w, h = sizes[i][0] * scale, sizes[i][1] * scale
        if w + 2 * gutter > 1.0:
            return None
        if x + w + 2 * gutter > 1.0:
            x, y = 0.0, y + shelf_h
            shelf_h = 0.0
        if y + h + 2 * gutter > 1.0:
            return None
        offsets[i] = (x + gutter, y + gutter)
        x += w + 2 * gutter
        shelf_h = max(shelf_h, h + 2 * gutter)
    return offsets


def pack_rects(rects: list[Rect], gutter: float = 2.0 / 256) -> tuple[list[tuple[float, float]], float]:
    """Atlas offsets and the uv-per-meter scale that fits every rectangle."""
    sizes = [r.size for r in rects]
    lo, hi = 0.0, 1.0 / max(max(s) for s in sizes)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _shelf_pack(sizes, mid, gutter) is None:
            hi = mid
        else:
            lo = mid
    return _shelf_pack(sizes, lo, gutter), lo


def mesh_from_rects(rects: list[Rect], gutter: float = 2.0 / 256) -> TexturedMesh:
    offsets, scale = pack_rects(rects, gutter)
    verts, faces, uvs, normals = [], [], [], []
    for rect, (ou, ov) in zip(rects, offsets):
        nu, nv = rect.subdiv
        wu, wv = rect.size
        n = np.cross(rect.edge_v, rect.edge_u)
        n = n / np.linalg.norm(n)
        base = len(verts)
        grid_uv = {}
        for j in range(nv + 1):
            for i in range(nu + 1):
                s, t = i / nu, j / nv
                verts.append(rect.origin + s * rect.edge_u + t * rect.edge_v)
                normals.append(n)
                grid_uv[(i, j)] = (ou + s * wu * scale, ov + t * wv * scale)
        idx = lambda i, j: base + j * (nu + 1) + i  # noqa: E731
        for j in range(nv):
            for i in range(nu):
                for tri in (((i, j), (i + 1, j), (i + 1, j + 1)), ((i, j), (i + 1, j + 1), (i, j + 1))):
                    faces.append([idx(*c) for c in tri])
                    uvs.append([grid_uv[c] for c in tri])
    return TexturedMesh(
        np.array(verts, dtype=np.float64),
        np.array(faces, dtype=np.int64),
        np.clip(np.array(uvs, dtype=np.float64), 0.0, 1.0),
        np.array(normals, dtype=np.float64),
    )


def per_triangle_atlas(vertices: np.ndarray, faces: np.ndarray, normals: np.ndarray | None = None) -> TexturedMesh:
    """Give every triangle its own half cell in a square grid of charts.

    Texel density varies per triangle; only meant for meshes that arrive
    without any parametrization.
    """
    from scenestyle.scene_io import vertex_normals

    faces = np.asarray(faces, dtype=np.int64)
    n_cells = math.ceil(math.sqrt(math.ceil(len(faces) / 2))) or 1
    cell = 1.0 / n_cells
    pad = 0.1 * cell
    uvs = np.zeros((len(faces), 3, 2))
    for fi in range(len(faces)):
        c = fi // 2
        x0, y0 = (c % n_cells) * cell, (c // n_cells) * cell
        a, b = x0 + pad, x0 + cell - pad
        top, bottom = y0 + pad, y0 + cell - pad
        if fi % 2 == 0:
            uvs[fi] = [(a, top), (b, top), (a, bottom)]
        else:
            uvs[fi] = [(b, bottom), (a, bottom), (b, top)]
    if normals is None:
        normals = vertex_normals(np.asarray(vertices, dtype=np.float64), faces)
    return TexturedMesh(np.asarray(vertices, dtype=np.float64), faces, uvs, normals)


# -- cameras -------------------------------------------------------------------------


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose with z toward ``target`` and y pointing down.

    ``up`` is the world direction that should appear up in the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def default_intrinsics(width: int = 160, height: int = 120, fov_y_deg: float = 60.0) -> CameraIntrinsics:
    f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


# -- scenes --------------------------------------------------------------------------


def quad_mesh(depth: float = 2.0, half_w: float = 1.0, half_h: float = 1.0, subdiv=(1, 1)) -> TexturedMesh:
    """Fronto-parallel quad at ``depth`` facing a camera at the origin, uv (0,0)-(1,1)."""
    rect = Rect(np.array([-half_w, -half_h, depth]), np.array([2 * half_w, 0.0, 0.0]),
                np.array([0.0, 2 * half_h, 0.0]), subdiv)
    mesh = mesh_from_rects([rect], gutter=0.0)
    uv_scale = mesh.uvs.max(axis=(0, 1))
    return TexturedMesh(mesh.vertices, mesh.faces, mesh.uvs / uv_scale, mesh.normals)


def room_rects(width=4.0, depth=5.0, height=2.5, subdiv=4) -> list[Rect]:
    """Closed box seen from inside; y points down, the floor is at y = 0."""
    w, d, h = width / 2, depth, height
    s = (subdiv, subdiv)
    return [
        Rect(np.array([-w, -h, d]), np.array([2 * w, 0, 0.0]), np.array([0, h, 0.0]), s),  # far wall
        Rect(np.array([w, -h, 0.0]), np.array([-2 * w, 0, 0.0]), np.array([0, h, 0.0]), s),  # near wall
        Rect(np.array([-w, -h, 0.0]), np.array([0, 0, d]), np.array([0, h, 0.0]), s),  # left wall
        Rect(np.array([w, -h, d]), np.array([0, 0, -d]), np.array([0, h, 0.0]), s),  # right wall
        Rect(np.array([-w, 0.0, d]), np.array([2 * w, 0, 0.0]), np.array([0, 0, -d]), s),  # floor
        Rect(np.array([-w, -h, 0.0]), np.array([2 * w, 0, 0.0]), np.array([0, 0, d]), s),  # ceiling
    ]


def corridor_rects(length=10.0, width=2.0, height=2.4, subdiv=(8, 2)) -> list[Rect]:
    """Open-ended corridor along +z seen from inside: two walls, floor, ceiling, end wall."""
    w, h, L = width / 2, height, length
    return [
        Rect(np.array([-w, -h, 0.0]), np.array([0, 0, L]), np.array([0, h, 0.0]), subdiv),  # left wall
        Rect(np.array([w, -h, L]), np.array([0, 0, -L]), np.array([0, h, 0.0]), subdiv),  # right wall
        Rect(np.array([-w, 0.0, L]), np.array([2 * w, 0, 0.0]), np.array([0, 0, -L]), (2, subdiv[0])),  # floor
        Rect(np.array([-w, -h, 0.0]), np.array([2 * w, 0, 0.0]), np.array([0, 0, L]), (2, subdiv[0])),  # ceiling
        Rect(np.array([-w, -h, L]), np.array([2 * w, 0, 0.0]), np.array([0, h, 0.0]), (2, 2)),  # end wall
    ]


def smooth_noise_texture(resolution: int, seed: int = 0, cells: int = 8, contrast: float = 0.35) -> np.ndarray:
    """Low-frequency colored noise in [0, 1], shape (R, R, 3)."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.5 - contrast, 0.5 + contrast, size=(cells, cells, 3)).astype(np.float32)
    return np.clip(cv2.resize(coarse, (resolution, resolution), interpolation=cv2.INTER_CUBIC), 0.0, 1.0)


def checker_texture(resolution: int, squares: int = 8) -> np.ndarray:
    idx = (np.arange(resolution) * squares // resolution)
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float32)
    return np.repeat(board[..., None], 3, axis=2) * 0.8 + 0.1


def render_frames(mesh: TexturedMesh, texture: np.ndarray, poses, intrinsics: CameraIntrinsics) -> list[Frame]:
    frames = []
    for i, pose in enumerate(poses):
        gb = rasterize_gbuffer(mesh, pose, intrinsics, intrinsics.height, derivatives=True)
        rgb = render_textured(mesh, texture, pose, intrinsics, intrinsics.height, gbuffer=gb)
        frames.append(Frame(i, rgb, gb.depth.copy(), np.asarray(pose, dtype=np.float64)))
    return frames


def make_scene(mesh: TexturedMesh, texture: np.ndarray, poses, intrinsics: CameraIntrinsics,
               depth_unit: float = 0.001) -> Scene:
    scene = Scene(mesh, tuple(render_frames(mesh, texture, poses, intrinsics)), intrinsics, depth_unit)
    scene.validate()
    return scene


def quad_scene(width=64, height=64, depth=2.0, texture_resolution=64, seed=0, fov_y_deg=None) -> Scene:
    """One frame of a quad that exactly fills the view."""
    if fov_y_deg is None:
        fov_y_deg = math.degrees(2 * math.atan(1.0 / depth))
    intr = default_intrinsics(width, height, fov_y_deg)
    half_w = depth * (width / 2) / intr.fx
    mesh = quad_mesh(depth, half_w=half_w, half_h=1.0 * depth * (height / 2) / intr.fy)
    tex = smooth_noise_texture(texture_resolution, seed)
    return make_scene(mesh, tex, [np.eye(4)], intr)


def room_scene(n_frames: int = 24, width: int = 96, height: int = 72, texture_resolution: int = 256,
               seed: int = 0, keep: int | None = None) -> Scene:
    """Closed box with a camera orbiting around its center.

    ``keep`` renders only the first frames of the orbit, for dense partial arcs.
    """
    mesh = mesh_from_rects(room_rects())
    tex = smooth_noise_texture(texture_resolution, seed, cells=16)
    intr = default_intrinsics(width, height, 70.0)
    poses = []
    for i in range(n_frames if keep is None else min(keep, n_frames)):
        a = 2 * math.pi * i / n_frames
        eye = np.array([0.4 * math.cos(a), -1.3, 2.5 + 0.4 * math.sin(a)])
        target = eye + np.array([math.cos(a + 1.2), 0.1, math.sin(a + 1.2)])
        poses.append(look_at(eye, target))
    return make_scene(mesh, tex, poses, intr)


def corridor_poses(n_frames: int = 12, length: float = 10.0, width: float = 2.0, height: float = 2.4,
                   max_yaw_deg: float = 35.0, seed: int = 0) -> list[np.ndarray]:
    """Camera walking down the corridor while looking around.

    Distances to the visible geometry span roughly 1 to 8 m and the walls are
    seen from frontal to strongly grazing angles.
    """
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_frames):
        t = i / max(1, n_frames - 1)
        z = 0.3 + t * 1.5
        yaw = math.radians(max_yaw_deg) * math.sin(2.3 * math.pi * t + rng.uniform(-0.3, 0.3))
        eye = np.array([rng.uniform(-0.2, 0.2) * width / 2, -height / 2 + rng.uniform(-0.1, 0.1), z])
        target = eye + np.array([math.sin(yaw), 0.05, math.cos(yaw)])
        poses.append(look_at(eye, target))
    return poses


def corridor_scene(n_frames: int = 12, width: int = 128, height: int = 96, texture_resolution: int = 512,
                   seed: int = 0, length: float = 10.0, max_yaw_deg: float = 35.0) -> Scene:
    mesh = mesh_from_rects(corridor_rects(length=length))
    tex = smooth_noise_texture(texture_resolution, seed, cells=24, contrast=0.15)
    intr = default_intrinsics(width, height, 70.0)
    return make_scene(mesh, tex, corridor_poses(n_frames, length=length, max_yaw_deg=max_yaw_deg, seed=seed), intr)


# -- images --------------------------------------------------------------------------


def red_circles_style(size: int = 512, radius: float | None = None, spacing: float | None = None,
                      seed: int = 0, jitter: float = 0.15) -> np.ndarray:
    """Red disks on white on a jittered grid, (size, size, 3) in [0, 1]."""
    rng = np.random.default_rng(seed)
    radius = size / 16 if radius is None else radius
    spacing = 3.2 * radius if spacing is None else spacing
    img = np.ones((size, size, 3), np.float32)
    n = int(size // spacing) + 1
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for j in range(n):
        for i in range(n):
            cx = (i + 0.5) * spacing + rng.uniform(-jitter, jitter) * spacing
            cy = (j + 0.5) * spacing + rng.uniform(-jitter, jitter) * spacing
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
            img[inside] = (1.0, 0.0, 0.0)
    return img


def draw_ellipse(image: np.ndarray, center, h_radius: float, v_radius: float, color=(1.0, 0.0, 0.0),
                 angle_deg: float = 0.0) -> np.ndarray:
    """Fill pixels whose centers lie inside the ellipse (in place; returns image)."""
    hgt, wid = image.shape[:2]
    yy, xx = np.mgrid[0:hgt, 0:wid] + 0.5
    a = math.radians(angle_deg)
    dx, dy = xx - center[0], yy - center[1]
    u = dx * math.cos(a) + dy * math.sin(a)
    v = -dx * math.sin(a) + dy * math.cos(a)
    inside = (u / h_radius) ** 2 + (v / v_radius) ** 2 <= 1.0
    image[inside] = color
    return image


def shipped_style_path() -> Path:
    """Red-circles style image shipped with the package (128 px, 8 px disk radius)."""
    return Path(__file__).with_name("data") / "red_circles.png"


def shipped_style() -> np.ndarray:
    from scenestyle.scene_io import read_rgb

    return read_rgb(shipped_style_path())
