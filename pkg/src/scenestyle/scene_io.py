"""Scene loading, validation, blur filtering.

On-disk scene layout::

    root/
      mesh.obj                 positions, per-corner uv, per-vertex normals
      intrinsics.txt           "fx fy cx cy" on one line
      frames/{id}.rgb.png      8-bit RGB
      frames/{id}.depth.png    16-bit depth, multiplied by depth_unit -> meters
      frames/{id}.pose.txt     4x4 camera-to-world matrix, row-major

uv coordinates use image orientation: u grows along texture columns and v
along texture rows (v=0 is the first row). Projection follows the pinhole
model with x right, y down and z forward; pixel (i, j) covers the continuous
square [j, j+1) x [i, i+1) so its center sits at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from scenestyle.config import Config

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-5
NORMAL_TOL = 1e-4

# Rec. 601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class SceneError(ValueError):
    """Raised for missing or malformed scene data."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, height: int) -> "CameraIntrinsics":
        """Intrinsics for a render of the given height, aspect ratio preserved."""
        width = max(1, int(round(height * self.width / self.height)))
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True, eq=False)
class TexturedMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    faces: np.ndarray  # (F, 3) int64
    uvs: np.ndarray  # (F, 3, 2) per-corner uv
    normals: np.ndarray  # (V, 3) unit

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise SceneError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise SceneError(f"faces must be (F, 3), got {f.shape}")
        if self.uvs.shape != (len(f), 3, 2):
            raise SceneError(f"uvs must be (F, 3, 2), got {self.uvs.shape}")
        if self.normals.shape != v.shape:
            raise SceneError("normals must match vertices")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise SceneError("face index out of range")
        if len(self.uvs) and (self.uvs.min() < 0.0 or self.uvs.max() > 1.0):
            raise SceneError("uv coordinates must lie in [0, 1]")
        if len(v):
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > NORMAL_TOL:
                raise SceneError("vertex normals must be unit length")

    @classmethod
    def empty(cls) -> "TexturedMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3, 2)), np.zeros((0, 3)))


@dataclass(frozen=True, eq=False)
class Frame:
    id: int
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    pose: np.ndarray  # (4, 4) camera-to-world

    def validate(self) -> None:
        check_pose(self.pose, f"frame {self.id}")
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise SceneError(f"frame {self.id}: rgb must be (H, W, 3)")
        if self.depth.shape != self.rgb.shape[:2]:
            raise SceneError(f"frame {self.id}: depth and rgb resolutions differ")
        if (self.depth < 0).any():
            raise SceneError(f"frame {self.id}: negative depth")


@dataclass(frozen=True, eq=False)
class Scene:
    mesh: TexturedMesh
    frames: tuple[Frame, ...]
    intrinsics: CameraIntrinsics
    depth_unit: float = 0.001

    def validate(self) -> None:
        self.mesh.validate()
        sizes = set()
        for fr in self.frames:
            fr.validate()
            sizes.add(fr.rgb.shape[:2])
        if len(sizes) > 1:
            raise SceneError(f"frame resolutions differ: {sorted(sizes)}")
        if sizes and sizes.pop() != (self.intrinsics.height, self.intrinsics.width):
            raise SceneError("frame resolution does not match intrinsics image size")

    def with_frames(self, frames) -> "Scene":
        return dataclasses.replace(self, frames=tuple(frames))


def check_pose(pose: np.ndarray, where: str = "pose") -> None:
    pose = np.asarray(pose)
    if pose.shape != (4, 4) or not np.isfinite(pose).all():
        raise SceneError(f"{where}: pose must be a finite 4x4 matrix")
    rot = pose[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHONORMAL_TOL:
        raise SceneError(f"{where}: rotation block is not orthonormal")
    if np.abs(pose[3] - [0, 0, 0, 1]).max() > ORTHONORMAL_TOL:
        raise SceneError(f"{where}: last row must be [0, 0, 0, 1]")


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted smooth vertex normals."""
    normals = np.zeros_like(vertices, dtype=np.float64)
    if len(faces):
        tri = vertices[faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    normals[norms[:, 0] == 0] = [0.0, 0.0, 1.0]
    return normals


# -- mesh text format ----------------------------------------------------------------


def read_obj(path: str | Path) -> TexturedMesh:
    path = Path(path)
    if not path.exists():
        raise SceneError(f"missing mesh file: {path}")
    verts, tex, norms, faces, face_uv, face_n = [], [], [], [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                tex.append([float(x) for x in parts[1:3]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                corners = [c.split("/") for c in parts[1:]]
                if len(corners) != 3:
                    raise SceneError(f"{path}:{lineno}: only triangles are supported")
                faces.append([int(c[0]) - 1 for c in corners])
                face_uv.append([int(c[1]) - 1 if len(c) > 1 and c[1] else -1 for c in corners])
                face_n.append([int(c[2]) - 1 if len(c) > 2 and c[2] else -1 for c in corners])
        except (ValueError, IndexError) as exc:
            raise SceneError(f"{path}:{lineno}: malformed line {line!r}") from exc

    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    face_uv = np.array(face_uv, dtype=np.int64).reshape(-1, 3)
    tex_arr = np.array(tex, dtype=np.float64).reshape(-1, 2)
    if len(faces_arr) and (face_uv < 0).any():
        raise SceneError(f"{path}: every face corner needs a uv coordinate")
    uvs = tex_arr[face_uv] if len(faces_arr) else np.zeros((0, 3, 2))

    face_n = np.array(face_n, dtype=np.int64).reshape(-1, 3)
    if norms and len(faces_arr) and (face_n >= 0).all():
        normals = np.zeros_like(vertices)
        normals[faces_arr.ravel()] = np.array(norms, dtype=np.float64)[face_n.ravel()]
    else:
        normals = vertex_normals(vertices, faces_arr)
    return TexturedMesh(vertices, faces_arr, uvs, normals)


def write_obj(mesh: TexturedMesh, path: str | Path) -> None:
    lines = ["# v: meters; vt: image-oriented uv (v grows downward); vn: per vertex"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.reshape(-1, 2).tolist()]
    lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in mesh.normals.tolist()]
    for fi, (a, b, c) in enumerate(mesh.faces.tolist()):
        t = 3 * fi + 1
        lines.append(f"f {a + 1}/{t}/{a + 1} {b + 1}/{t + 1}/{b + 1} {c + 1}/{t + 2}/{c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- frames --------------------------------------------------------------------------


def read_rgb(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise SceneError(f"missing or unreadable image: {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float32) / scale


def write_rgb(path: str | Path, rgb: np.ndarray, bits: int = 8) -> None:
    scale, dtype = (65535.0, np.uint16) if bits == 16 else (255.0, np.uint8)
    img = np.round(np.clip(rgb, 0.0, 1.0) * scale).astype(dtype)
    cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))


def read_depth(path: Path, depth_unit: float) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise SceneError(f"missing or unreadable depth map: {path}")
    if raw.ndim != 2:
        raise SceneError(f"{path}: depth map must be single-channel")
    return (raw.astype(np.float64) * depth_unit).astype(np.float32)


def write_depth(path: str | Path, depth: np.ndarray, depth_unit: float) -> None:
    raw = np.clip(np.round(np.asarray(depth, np.float64) / depth_unit), 0, 65535).astype(np.uint16)
    cv2.imwrite(str(path), raw)


def read_pose(path: Path) -> np.ndarray:
    if not path.exists():
        raise SceneError(f"missing pose file: {path}")
    try:
        values = np.array(path.read_text().split(), dtype=np.float64)
    except ValueError as exc:
        raise SceneError(f"{path}: pose contains non-numeric values") from exc
    if values.size != 16:
        raise SceneError(f"{path}: pose must have 16 values, found {values.size}")
    pose = values.reshape(4, 4)
    check_pose(pose, str(path))
    return pose


def write_pose(path: str | Path, pose: np.ndarray) -> None:
    rows = [" ".join(repr(float(x)) for x in row) for row in np.asarray(pose)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_intrinsics(path: Path, width: int, height: int) -> CameraIntrinsics:
    if not path.exists():
        raise SceneError(f"missing intrinsics file: {path}")
    try:
        fx, fy, cx, cy = (float(x) for x in path.read_text().split())
    except ValueError as exc:
        raise SceneError(f"{path}: expected 'fx fy cx cy'") from exc
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def frame_ids(root: Path) -> list[int]:
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise SceneError(f"missing frames directory: {frames_dir}")
    ids = set()
    for p in frames_dir.glob("*.pose.txt"):
        stem = p.name.split(".")[0]
        if stem.isdigit():
            ids.add(int(stem))
    return sorted(ids)


def load_scene(root: str | Path, config: Config | None = None) -> Scene:
    root = Path(root)
    depth_unit = (config or Config()).depth_unit
    if not root.is_dir():
        raise SceneError(f"missing scene directory: {root}")
    mesh = read_obj(root / "mesh.obj")
    frames = []
    for fid in frame_ids(root):
        base = root / "frames"
        rgb = read_rgb(base / f"{fid}.rgb.png")
        depth = read_depth(base / f"{fid}.depth.png", depth_unit)
        pose = read_pose(base / f"{fid}.pose.txt")
        frames.append(Frame(fid, rgb, depth, pose))
    if not frames:
        raise SceneError(f"no frames found under {root / 'frames'}")
    h, w = frames[0].rgb.shape[:2]
    intr = read_intrinsics(root / "intrinsics.txt", w, h)
    scene = Scene(mesh, tuple(frames), intr, depth_unit)
    scene.validate()
    return scene


def save_scene(scene: Scene, root: str | Path) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    write_obj(scene.mesh, root / "mesh.obj")
    k = scene.intrinsics
    (root / "intrinsics.txt").write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")
    for fr in scene.frames:
        write_rgb(root / "frames" / f"{fr.id}.rgb.png", fr.rgb)
        write_depth(root / "frames" / f"{fr.id}.depth.png", fr.depth, scene.depth_unit)
        write_pose(root / "frames" / f"{fr.id}.pose.txt", fr.pose)


# -- blur filtering ------------------------------------------------------------------


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64)[..., :3] @ LUMA


def blur_score(rgb: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response of the luma image.

    Borders are handled by edge replication so a constant image scores 0.
    """
    gray = to_gray(rgb)
    response = ndimage.convolve(gray, LAPLACIAN_KERNEL, mode="nearest")
    return float(response.var())


def filter_frames(scene: Scene, threshold: float) -> Scene:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    kept = [fr for fr in scene.frames if blur_score(fr.rgb) >= threshold]
    if not kept:
        raise SceneError(
            f"all {len(scene.frames)} frames scored below blur threshold {threshold}; "
            "lower blur_threshold"
        )
    dropped = len(scene.frames) - len(kept)
    if dropped:
        log.info("dropped %d blurry frames", dropped)
    return scene.with_frames(kept)
