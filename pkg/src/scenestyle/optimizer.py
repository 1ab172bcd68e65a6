"""Texture optimization over all frames of a scene.

One step processes one frame: the texture is sampled into that frame's
render pyramid, the nearest-level and second-nearest-level loss terms are
evaluated on the sampled images, their image gradients are blended per pixel
and pushed back into the texel pyramid, and Adam takes a step. Each frame is
repeated ``frame_repeats`` times in a row before moving to the next one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from scenestyle.config import Config
from scenestyle.features import FeatureExtractor, extract_features, make_extractor
from scenestyle.grad_blend import PixelGradientPair, angle_weight, blend_gradients, depth_blend_weight
from scenestyle.rasterizer import RenderPyramid, build_render_pyramid, load_pyramid
from scenestyle.scene_io import Frame, Scene
from scenestyle.stylization import (
    DepthLevelAssignment,
    NoVisibleGeometry,
    StyleTargets,
    TapMasks,
    angle_mask,
    build_style_targets,
    compute_depth_levels,
    content_features,
    content_terms,
    level_weights,
    make_tap_masks,
    style_terms,
)
from scenestyle.texture import LaplacianTexture, init_texture, project_range, reg_loss, sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("full", "angle", "2d")


class OptimizationError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_at(epoch: int, config: Config) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


def mode_heights(config: Config, mode: str) -> list[int]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if mode == "full":
        return list(config.pyramid_heights)
    return [config.single_level_height or config.pyramid_heights[0]]


@dataclass(eq=False)
class PoseContext:
    """Everything about one frame that does not depend on the texture."""

    frame_id: int
    pyramid: RenderPyramid
    assignment: DepthLevelAssignment
    w_near: np.ndarray
    w_second: np.ndarray
    masks_near: TapMasks
    masks_second: TapMasks
    content: list[torch.Tensor]
    w_d: list[torch.Tensor]
    w_a: list[torch.Tensor]

    @property
    def has_second(self) -> bool:
        return bool(self.w_second.any())


def build_pose_context(frame: Frame, pyramid: RenderPyramid, config: Config, extractor: FeatureExtractor,
                       mode: str = "full", dtype=torch.float32) -> PoseContext:
    assignment = compute_depth_levels(pyramid, config)
    near = level_weights(assignment, config.min_part_positions)
    second = level_weights(assignment, config.min_part_positions, masks=assignment.second_masks,
                           allow_empty=True)
    if mode == "2d":
        angles = None
        w_a = [gb.coverage.astype(np.float64) for gb in pyramid.levels]
    else:
        angles = [angle_mask(gb, config.theta_a) for gb in pyramid.levels]
        w_a = [angle_weight(gb.cos_angle, gb.coverage) for gb in pyramid.levels]
    w_d = [depth_blend_weight(assignment, l, config.blend_mode) for l in range(len(pyramid))]
    shapes = [gb.shape for gb in pyramid.levels]
    return PoseContext(
        frame_id=frame.id,
        pyramid=pyramid,
        assignment=assignment,
        w_near=near.w_hat,
        w_second=second.w_hat,
        masks_near=make_tap_masks(assignment.level_masks, angles),
        masks_second=make_tap_masks(assignment.second_masks, angles),
        content=content_features(frame.rgb, shapes, extractor, dtype),
        w_d=[torch.as_tensor(w, dtype=dtype) for w in w_d],
        w_a=[torch.as_tensor(w, dtype=dtype) for w in w_a],
    )


def part_losses(images, ctx: PoseContext, targets: StyleTargets, extractor: FeatureExtractor,
                which: str = "near", feats=None):
    """(content, style) for the nearest-level parts or the second-nearest parts."""
    w = ctx.w_near if which == "near" else ctx.w_second
    masks = ctx.masks_near if which == "near" else ctx.masks_second
    if feats is None:
        feats = [extract_features(img, extractor) if w[l] else None for l, img in enumerate(images)]
    return content_terms(feats, ctx.content, masks, w), style_terms(feats, masks, targets, w)


def pose_objective(texture: LaplacianTexture, ctx: PoseContext, targets: StyleTargets,
                   extractor: FeatureExtractor, config: Config) -> tuple[torch.Tensor, dict[str, float]]:
    """Scalar ``lambda_c*L_c + lambda_s*L_s + lambda_r*L_r`` over the nearest-level parts."""
    images = [sample(texture, gb)[0] for gb in ctx.pyramid.levels]
    lc, ls = part_losses(images, ctx, targets, extractor, "near")
    lr = reg_loss(texture)
    total = config.lambda_content * lc + config.lambda_style * ls + config.lambda_reg * lr
    return total, {k: _num(v) for k, v in (("L_c", lc), ("L_s", ls), ("L_r", lr), ("total", total))}


@dataclass(eq=False)
class OptimizationState:
    texture: LaplacianTexture
    adam: torch.optim.Adam
    step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def epoch(self, steps_per_epoch: int) -> int:
        return self.step // steps_per_epoch if steps_per_epoch else 0


class TextureOptimizer:
    def __init__(self, scene: Scene, style_image, config: Config, mode: str = "full",
                 extractor: FeatureExtractor | None = None, cache_dir: str | Path | None = None,
                 dtype=torch.float32, texture: LaplacianTexture | None = None):
        self.scene = scene
        self.config = config
        self.mode = mode
        self.heights = mode_heights(config, mode)
        self.dtype = dtype
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        torch.manual_seed(config.seed)
        self.extractor = extractor if extractor is not None else make_extractor(config, dtype)
        self.targets = build_style_targets(style_image, self.extractor, config.style_min_size, dtype)
        tex = texture if texture is not None else init_texture(config, dtype=dtype)
        tex.requires_grad_(True)
        adam = torch.optim.Adam(tex.parameters(), lr=lr_at(0, config), betas=tuple(config.adam_betas),
                                eps=config.adam_eps)
        self.state = OptimizationState(tex, adam, seed=config.seed)
        self._contexts: dict[int, PoseContext | None] = {}

    @property
    def texture(self) -> LaplacianTexture:
        return self.state.texture

    @property
    def steps_per_epoch(self) -> int:
        return len(self.scene.frames) * self.config.frame_repeats

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    def schedule(self, step: int) -> tuple[int, Frame]:
        epoch, rem = divmod(step, self.steps_per_epoch)
        return epoch, self.scene.frames[rem // self.config.frame_repeats]

    def pyramid(self, frame: Frame) -> RenderPyramid:
        if self.cache_dir is not None and self.mode == "full":
            try:
                return load_pyramid(self.cache_dir, frame.id, self.heights)
            except FileNotFoundError:
                pass
        return build_render_pyramid(self.scene.mesh, frame.pose, self.scene.intrinsics, self.config,
                                    heights=self.heights)

    def context(self, frame: Frame) -> PoseContext | None:
        if frame.id not in self._contexts:
            try:
                ctx = build_pose_context(frame, self.pyramid(frame), self.config, self.extractor,
                                         self.mode, self.dtype)
            except NoVisibleGeometry:
                log.warning("frame %d sees no usable geometry; skipped", frame.id)
                ctx = None
            self._contexts[frame.id] = ctx
        return self._contexts[frame.id]

    def step(self) -> dict:
        cfg = self.config
        epoch, frame = self.schedule(self.state.step)
        ctx = self.context(frame)
        record = {"step": self.state.step, "epoch": epoch, "frame": frame.id}
        tex = self.texture
        if ctx is None:
            record.update(L_c=0.0, L_s=0.0, L_r=_num(reg_loss(tex)), total=0.0, skipped=True)
            self.state.step += 1
            self.state.history.append(record)
            return record

        images = [sample(tex, gb)[0] for gb in ctx.pyramid.levels]
        leaves = [img.detach().requires_grad_(True) for img in images]
        needed = [bool(ctx.w_near[l] or ctx.w_second[l]) for l in range(len(leaves))]
        feats = [extract_features(x, self.extractor) if needed[l] else None for l, x in enumerate(leaves)]
        lc1, ls1 = part_losses(leaves, ctx, self.targets, self.extractor, "near", feats)
        loss1 = cfg.lambda_content * lc1 + cfg.lambda_style * ls1
        g1 = self._image_grads(loss1, leaves, retain=ctx.has_second)
        terms2 = {}
        if ctx.has_second:
            lc2, ls2 = part_losses(leaves, ctx, self.targets, self.extractor, "second", feats)
            loss2 = cfg.lambda_content * lc2 + cfg.lambda_style * ls2
            g2 = self._image_grads(loss2, leaves, retain=False)
            terms2 = {"L_c2": _num(lc2), "L_s2": _num(ls2)}
        else:
            g2 = [torch.zeros_like(x) for x in leaves]
        lr_term = reg_loss(tex)
        total = loss1 + cfg.lambda_reg * lr_term

        record.update(L_c=_num(lc1), L_s=_num(ls1), L_r=_num(lr_term), total=_num(total), **terms2)
        if not all(math.isfinite(v) for k, v in record.items() if k.startswith("L_") or k == "total"):
            raise OptimizationError(f"non-finite loss at step {self.state.step}, frame {frame.id}: {record}")

        blended = [blend_gradients(PixelGradientPair(a, b), ctx.w_d[l], ctx.w_a[l])
                   for l, (a, b) in enumerate(zip(g1, g2))]
        for group in self.state.adam.param_groups:
            group["lr"] = lr_at(epoch, cfg)
        self.state.adam.zero_grad(set_to_none=False)
        roots, grads = list(images), list(blended)
        if cfg.lambda_reg and lr_term.requires_grad:
            roots.append(cfg.lambda_reg * lr_term)
            grads.append(torch.ones((), dtype=lr_term.dtype))
        torch.autograd.backward(roots, grads)
        self.state.adam.step()
        if cfg.clamp_texture:
            project_range(tex)
        self.state.step += 1
        self.state.history.append(record)
        return record

    @staticmethod
    def _image_grads(loss, leaves, retain: bool):
        if not loss.requires_grad:
            return [torch.zeros_like(x) for x in leaves]
        grads = torch.autograd.grad(loss, leaves, retain_graph=retain, allow_unused=True)
        return [torch.zeros_like(x) if g is None else g for g, x in zip(grads, leaves)]

    def run(self, max_steps: int | None = None, history_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None, checkpoint_every: int | None = None) -> LaplacianTexture:
        end = self.total_steps if max_steps is None else min(self.total_steps, self.state.step + max_steps)
        fh = open(history_path, "a") if history_path is not None else None
        try:
            while self.state.step < end:
                rec = self.step()
                if fh is not None:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if checkpoint_dir is not None and checkpoint_every and self.state.step % checkpoint_every == 0:
                    self.save_checkpoint(checkpoint_dir)
        finally:
            if fh is not None:
                fh.close()
        return self.texture

    # -- checkpoints -----------------------------------------------------------------

    def save_checkpoint(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tex = self.texture
        tex.save(directory, "texture")
        m_levels, v_levels, adam_step = [], [], 0
        for p in tex.parameters():
            st = self.state.adam.state.get(p, {})
            m_levels.append(st.get("exp_avg", torch.zeros_like(p)).detach())
            v_levels.append(st.get("exp_avg_sq", torch.zeros_like(p)).detach())
            adam_step = int(st.get("step", 0))
        LaplacianTexture(m_levels).save(directory, "adam_m")
        LaplacianTexture(v_levels).save(directory, "adam_v")
        meta = {
            "version": CHECKPOINT_VERSION,
            "step": self.state.step,
            "epoch": self.state.epoch(self.steps_per_epoch),
            "adam_step": adam_step,
            "seed": self.state.seed,
            "mode": self.mode,
            "texture_levels": tex.num_levels,
            "config_hash": self.config.hash(),
            "history": self.state.history,
        }
        (directory / "state.json").write_text(json.dumps(meta, sort_keys=True))
        return directory

    def load_checkpoint(self, directory: str | Path) -> None:
        meta = read_checkpoint_meta(directory)
        n = meta["texture_levels"]
        tex = LaplacianTexture.load(directory, n, "texture", self.dtype)
        m = LaplacianTexture.load(directory, n, "adam_m", self.dtype)
        v = LaplacianTexture.load(directory, n, "adam_v", self.dtype)
        with torch.no_grad():
            for dst, src in zip(self.texture.parameters(), tex.parameters()):
                dst.copy_(src)
        adam = self.state.adam
        adam.state.clear()
        if meta["adam_step"] > 0:
            for p, mk, vk in zip(self.texture.parameters(), m.parameters(), v.parameters()):
                adam.state[p] = {"step": torch.tensor(float(meta["adam_step"])), "exp_avg": mk.clone(),
                                 "exp_avg_sq": vk.clone()}
        self.state.step = meta["step"]
        self.state.seed = meta["seed"]
        self.state.history = list(meta["history"])

    @classmethod
    def resume(cls, directory: str | Path, scene: Scene, style_image, config: Config, **kwargs) -> "TextureOptimizer":
        meta = read_checkpoint_meta(directory)
        kwargs.setdefault("mode", meta.get("mode", "full"))
        opt = cls(scene, style_image, config, **kwargs)
        opt.load_checkpoint(directory)
        return opt


def _num(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def read_checkpoint_meta(directory: str | Path) -> dict:
    path = Path(directory) / "state.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    meta = json.loads(path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return meta


def optimize(scene: Scene, style_image, config: Config, mode: str = "full", **kwargs) -> LaplacianTexture:
    return TextureOptimizer(scene, style_image, config, mode=mode, **kwargs).run()


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, bool)]
    mse = float(diff.mean())
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)
