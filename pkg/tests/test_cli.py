import json

import numpy as np
import pytest

from scenestyle import synthetic
from scenestyle.cli import build_parser, main, read_trajectory, write_trajectory
from scenestyle.config import Config
from scenestyle.rasterizer import render_textured
from scenestyle.scene_io import read_rgb, save_scene, write_rgb
from tests.conftest import small_config


@pytest.fixture
def workspace(tmp_path):
    scene = synthetic.quad_scene(32, 32, texture_resolution=32)
    fr = scene.frames[0]
    scene = scene.with_frames([fr, type(fr)(1, fr.rgb, fr.depth, fr.pose)])
    save_scene(scene, tmp_path / "scene")
    small_config(frame_repeats=2, blur_threshold=0.0).save(tmp_path / "cfg.yaml")
    write_rgb(tmp_path / "style.png", synthetic.red_circles_style(32, radius=4, spacing=10))
    return tmp_path


def preprocess(ws, *extra):
    return main(["preprocess", str(ws / "scene"), "--out", str(ws / "runs"), "--config", str(ws / "cfg.yaml"), *extra])


def run_dir(ws):
    (d,) = list((ws / "runs").iterdir())
    return d


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key, value in Config().to_dict().items():
        assert f"{key} = " in out
    assert "lambda_reg = 5000.0" in out and "theta_d = 0.25" in out


def test_preprocess_writes_cache_and_hits_on_rerun(workspace, capsys):
    assert preprocess(workspace) == 0
    rd = run_dir(workspace)
    assert rd.name == Config.load(workspace / "cfg.yaml").hash()
    files = sorted((rd / "cache").glob("*.gbuf"))
    assert len(files) == 2 * 2  # frames x levels
    manifest = json.loads((rd / "cache" / "manifest.json").read_text())
    assert set(manifest["artifacts"]) >= {f.name for f in files}
    assert manifest["config_hash"] == Config.from_dict(manifest["config"]).hash()
    mtimes = [f.stat().st_mtime_ns for f in files]
    capsys.readouterr()
    assert preprocess(workspace) == 0
    assert "up to date" in capsys.readouterr().out
    assert [f.stat().st_mtime_ns for f in files] == mtimes


def test_preprocess_corrupted_pose(workspace, capsys):
    (workspace / "scene" / "frames" / "1.pose.txt").write_text("1 0 0\nnot a pose\n")
    assert preprocess(workspace) == 1
    assert "1.pose.txt" in capsys.readouterr().err


def test_bad_config_key_is_usage_error(workspace):
    assert preprocess(workspace, "--set", "no_such_key=3") == 2


def test_optimize_resume_and_missing_style(workspace):
    assert preprocess(workspace) == 0
    rd = run_dir(workspace)
    assert main(["optimize", str(rd), "--style", str(workspace / "nope.png")]) == 1
    assert main(["optimize", str(rd), "--style", str(workspace / "style.png"), "--max-steps", "2"]) == 0
    out = rd / "full"
    assert (out / "texture.png").exists() and (out / "texture.json").exists()
    assert len((out / "history.jsonl").read_text().splitlines()) == 2
    assert main(["optimize", str(rd), "--style", str(workspace / "style.png"), "--resume"]) == 0
    hist = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
    assert [h["step"] for h in hist] == [0, 1, 2, 3]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["steps"] == 4 and manifest["mode"] == "full"
    for a in manifest["artifacts"]:
        assert (out / a).exists()


def test_optimize_without_cache_is_usage_error(workspace):
    assert main(["optimize", str(workspace), "--style", str(workspace / "style.png")]) == 2


def test_render_one_pose_constant_texture_deterministic(workspace):
    tex = np.zeros((16, 16, 3), np.float32)
    tex[..., 1] = 1.0
    write_rgb(workspace / "green.png", tex)
    write_trajectory(workspace / "traj.txt", [np.eye(4)])
    args = ["render", "--texture", str(workspace / "green.png"), "--scene", str(workspace / "scene"),
            "--trajectory", str(workspace / "traj.txt")]
    assert main(args + ["--out", str(workspace / "a")]) == 0
    assert main(args + ["--out", str(workspace / "b")]) == 0
    (img_path,) = sorted((workspace / "a").glob("*.png"))
    a = (workspace / "a" / "00000.png").read_bytes()
    assert a == (workspace / "b" / "00000.png").read_bytes()
    img = read_rgb(img_path)
    assert np.array_equal(img[16, 16], [0.0, 1.0, 0.0])


def test_render_empty_trajectory_fails(workspace):
    (workspace / "traj.txt").write_text("")
    assert main(["render", "--texture", str(workspace / "style.png"), "--scene", str(workspace / "scene"),
                 "--trajectory", str(workspace / "traj.txt"), "--out", str(workspace / "r")]) == 2


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [rng.normal(size=(4, 4)) for _ in range(3)]
    write_trajectory(tmp_path / "t.txt", poses)
    back = read_trajectory(tmp_path / "t.txt")
    assert all(np.array_equal(a, b) for a, b in zip(poses, back))


def test_eval_unknown_metric_exit_code(workspace, capsys):
    code = main(["eval", "--scene", str(workspace / "scene"), "--renders", str(workspace),
                 "--metrics", "reprojection,sharpness", "--out", str(workspace / "ev")])
    assert code == 2
    err = capsys.readouterr().err
    assert "sharpness" in err and "circles" in err and "reprojection" in err


def test_eval_circles_and_reprojection(tmp_path):
    # a wall of red disks seen frontally; every frame sees the same pattern
    scene = synthetic.quad_scene(160, 120, texture_resolution=32, fov_y_deg=40.0)
    fr = scene.frames[0]
    frames = []
    for i in range(3):
        pose = fr.pose.copy()
        pose[0, 3] += 0.02 * i
        frames.append(type(fr)(i, fr.rgb, fr.depth, pose))
    tex = synthetic.red_circles_style(256, radius=20, spacing=64)
    frames = [type(f)(f.id, render_textured(scene.mesh, tex, f.pose, scene.intrinsics, 120), f.depth, f.pose)
              for f in frames]
    scene = scene.with_frames(frames)
    save_scene(scene, tmp_path / "scene")
    renders = tmp_path / "renders"
    renders.mkdir()
    for i, f in enumerate(frames):
        write_rgb(renders / f"{i:05d}.png", f.rgb)
    code = main(["eval", "--scene", str(tmp_path / "scene"), "--renders", str(renders),
                 "--metrics", "reprojection,circles", "--out", str(tmp_path / "ev"), "--set", "blur_threshold=0"])
    assert code == 0
    aw = json.loads((tmp_path / "ev" / "awareness.json").read_text())
    assert aw["count"] > 0
    assert (tmp_path / "ev" / "ellipses.jsonl").read_text().strip()
    assert (tmp_path / "ev" / "reprojection.jsonl").exists()
    assert "Method" in (tmp_path / "ev" / "summary.md").read_text()
