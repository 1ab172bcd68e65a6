"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from scenestyle.config import KEY_HELP, Config, ConfigError

log = logging.getLogger("scenestyle")

METRICS = ("reprojection", "circles")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _config_epilog() -> str:
    lines = ["config keys (YAML file via --config, or --set key=value):"]
    for f in dataclasses.fields(Config):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  {f.name} = {default!r}  -- {KEY_HELP.get(f.name, '')}")
    return "\n".join(lines)


def load_config(args) -> Config:
    data = {}
    if getattr(args, "config", None):
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key] = yaml.safe_load(value)
    return Config.from_dict(data)


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_digest(path: Path) -> str:
    """Hash of a manifest with its timestamps removed, so reruns hash equal."""
    data = json.loads(Path(path).read_text())
    data.pop("timestamps", None)
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(path: Path, config: Config, inputs: dict, artifacts: list[Path], mode: str | None,
                   extra: dict | None = None) -> dict:
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "inputs": inputs,
        "artifacts": sorted(str(Path(a).relative_to(path.parent)) for a in artifacts),
        "mode": mode,
        "timestamps": {"written": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_trajectory(path: Path) -> list[np.ndarray]:
    values = np.array(Path(path).read_text().split(), dtype=np.float64)
    if values.size % 16:
        raise ValueError(f"{path}: trajectory must hold 4x4 matrices, found {values.size} numbers")
    return [m for m in values.reshape(-1, 4, 4)]


def write_trajectory(path: Path, poses) -> None:
    blocks = ["\n".join(" ".join(repr(float(x)) for x in row) for row in pose) for pose in poses]
    Path(path).write_text("\n\n".join(blocks) + "\n")


# -- commands ------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from scenestyle.rasterizer import build_render_pyramid, save_pyramid
    from scenestyle.scene_io import filter_frames, load_scene

    config = load_config(args)
    scene_dir = Path(args.scene)
    run_dir = Path(args.out) / config.hash()
    cache = run_dir / "cache"
    inputs = {"scene": tree_hash(scene_dir)}
    manifest_path = cache / MANIFEST
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("inputs") == inputs and old.get("config_hash") == config.hash():
            print(f"cache up to date: {cache}")
            return 0
    scene = filter_frames(load_scene(scene_dir, config), config.blur_threshold)
    cache.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for frame in scene.frames:
        pyr = build_render_pyramid(scene.mesh, frame.pose, scene.intrinsics, config)
        artifacts += save_pyramid(pyr, cache, frame.id)
    frames_file = cache / "frames.json"
    frames_file.write_text(json.dumps([f.id for f in scene.frames]) + "\n")
    artifacts.append(frames_file)
    config.save(run_dir / "config.yaml")
    write_manifest(manifest_path, config, inputs, artifacts, None,
                   {"scene_dir": str(scene_dir.resolve())})
    print(f"cached {len(scene.frames)} frames x {config.num_levels} levels in {cache}")
    return 0


def _scene_from_cache(cache: Path, config: Config):
    from scenestyle.scene_io import load_scene

    manifest = json.loads((cache / MANIFEST).read_text())
    scene = load_scene(manifest["scene_dir"], config)
    keep = set(json.loads((cache / "frames.json").read_text()))
    return scene.with_frames([f for f in scene.frames if f.id in keep])


def cmd_optimize(args) -> int:
    from scenestyle.optimizer import TextureOptimizer
    from scenestyle.scene_io import read_rgb
    from scenestyle.texture import export_texture

    run_dir = Path(args.run)
    cache = run_dir / "cache"
    if not (cache / MANIFEST).exists():
        raise UsageError(f"no preprocessed cache in {run_dir}; run 'preprocess' first")
    config = load_config(args) if (args.config or args.set) else Config.load(run_dir / "config.yaml")
    style_path = Path(args.style)
    if not style_path.exists():
        raise FileNotFoundError(f"style image not found: {style_path}")
    style = read_rgb(style_path)
    scene = _scene_from_cache(cache, config)
    out = run_dir / args.mode
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    history = out / "history.jsonl"
    if args.resume:
        opt = TextureOptimizer.resume(ckpt, scene, style, config, mode=args.mode, cache_dir=cache)
        history.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in opt.state.history))
    else:
        opt = TextureOptimizer(scene, style, config, mode=args.mode, cache_dir=cache)
        history.write_text("")
    opt.run(max_steps=args.max_steps, history_path=history, checkpoint_dir=ckpt,
            checkpoint_every=args.checkpoint_every)
    opt.save_checkpoint(ckpt)
    tex_path = export_texture(opt.texture, out / "texture.png", config)
    artifacts = [tex_path, tex_path.with_suffix(".json"), history] + sorted(ckpt.iterdir())
    write_manifest(out / MANIFEST, config, {"cache": manifest_digest(cache / MANIFEST), "style": file_hash(style_path)},
                   artifacts, args.mode, {"steps": opt.state.step})
    print(f"optimized {opt.state.step} steps; texture written to {tex_path}")
    return 0


def cmd_render(args) -> int:
    from scenestyle.rasterizer import render_textured
    from scenestyle.scene_io import load_scene, read_intrinsics, read_obj, read_rgb, write_rgb

    scene_dir = Path(args.scene)
    mesh = read_obj(scene_dir / "mesh.obj")
    poses = read_trajectory(Path(args.trajectory))
    if not poses:
        raise UsageError("trajectory holds no poses")
    if args.width and args.height:
        intr = read_intrinsics(scene_dir / "intrinsics.txt", args.width, args.height)
    else:
        intr = load_scene(scene_dir).intrinsics
    texture = read_rgb(Path(args.texture))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    height = args.render_height or intr.height
    paths = []
    for i, pose in enumerate(poses):
        img = render_textured(mesh, texture, pose, intr, height)
        p = out / f"{i:05d}.png"
        write_rgb(p, img)
        paths.append(p)
    print(f"rendered {len(paths)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    from scenestyle import evalkit
    from scenestyle.rasterizer import rasterize_gbuffer
    from scenestyle.scene_io import load_scene, read_rgb

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise UsageError(f"unknown metric(s) {', '.join(unknown)}; valid: {', '.join(METRICS)}")
    config = load_config(args)
    scene = load_scene(args.scene, config)
    renders = sorted(Path(args.renders).glob("*.png"))
    if len(renders) != len(scene.frames):
        raise ValueError(f"{len(renders)} renders for {len(scene.frames)} scene frames")
    images = [read_rgb(p) for p in renders]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    if "reprojection" in metrics:
        rep = evalkit.reprojection_error(images, scene, offsets=(2, 20), depth_tolerance=config.depth_tolerance)
        evalkit.write_jsonl(out / "reprojection.jsonl", rep.to_records())
        rows[args.label] = {"short_range": rep.short_range, "long_range": rep.long_range}
        print(f"reprojection: short-range {rep.short_range:.4f}, long-range {rep.long_range:.4f}")
    if "circles" in metrics:
        records = []
        for frame, img in zip(scene.frames, images):
            gb = rasterize_gbuffer(scene.mesh, frame.pose, scene.intrinsics, img.shape[0])
            found = evalkit.segment_ellipses(img, frame.id)
            records += evalkit.lift_ellipses(found, gb, frame.pose, scene.intrinsics)
        report = evalkit.awareness_metrics(records)
        evalkit.write_jsonl(out / "ellipses.jsonl", [r.to_dict() for r in records])
        (out / "awareness.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        rows.setdefault(args.label, {}).update(report.to_dict())
        print(f"circles: {report.count} ellipses, corr2d {report.corr_2d:.3f}, "
              f"corr3d {report.corr_3d:.3f}, stretch {report.stretch:.3f}")
    (out / "summary.md").write_text(evalkit.summary_table(rows))
    return 0


def cmd_fixture(args) -> int:
    from scenestyle import synthetic
    from scenestyle.scene_io import save_scene

    builders = {"quad": synthetic.quad_scene, "room": synthetic.room_scene, "corridor": synthetic.corridor_scene}
    scene = builders[args.kind]()
    save_scene(scene, args.out)
    write_trajectory(Path(args.out) / "trajectory.txt", [f.pose for f in scene.frames])
    print(f"wrote {args.kind} fixture with {len(scene.frames)} frames to {args.out}")
    return 0


def cmd_style(args) -> int:
    from scenestyle.scene_io import write_rgb
    from scenestyle.synthetic import red_circles_style

    write_rgb(args.out, red_circles_style(args.size, seed=args.seed))
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenestyle", description="Depth- and angle-aware texture stylization of scene meshes.",
        epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = with_config(sub.add_parser("preprocess", help="filter frames and cache render pyramids",
                                   epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter))
    p.add_argument("scene")
    p.add_argument("--out", default="runs", help="root of run directories (named by config hash)")
    p.set_defaults(func=cmd_preprocess)

    p = with_config(sub.add_parser("optimize", help="optimize the stylized texture"))
    p.add_argument("run", help="run directory created by preprocess")
    p.add_argument("--style", required=True)
    p.add_argument("--mode", choices=("full", "angle", "2d"), default="full")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render a trajectory with an exported texture")
    p.add_argument("--texture", required=True)
    p.add_argument("--scene", required=True, help="scene directory (mesh and intrinsics)")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render-height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = with_config(sub.add_parser("eval", help="evaluate a rendered trajectory"))
    p.add_argument("--scene", required=True)
    p.add_argument("--renders", required=True, help="directory of rendered frames in scene order")
    p.add_argument("--metrics", default="reprojection", help=f"comma-separated: {', '.join(METRICS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="Ours")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-fixture", help="write a synthetic scene directory")
    p.add_argument("kind", choices=("quad", "room", "corridor"))
    p.add_argument("out")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("make-style", help="write the red-circles style image")
    p.add_argument("out")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_style)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every runtime failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
