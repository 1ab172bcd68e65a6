import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from scenestyle import synthetic
from scenestyle.config import Config, ConfigError
from scenestyle.scene_io import (
    Frame, Scene, SceneError, blur_score, check_pose, filter_frames, load_scene, save_scene,
    write_depth, write_pose,
)


def test_minimal_fixture_round_trip(tmp_path, quad_scene):
    save_scene(quad_scene, tmp_path)
    loaded = load_scene(tmp_path)
    assert len(loaded.frames) == 1
    a, b = quad_scene.mesh, loaded.mesh
    # geometry and poses are written with repr floats, so they come back bit-exact
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.faces, b.faces)
    assert np.array_equal(a.uvs, b.uvs)
    assert np.array_equal(a.normals, b.normals)
    assert np.array_equal(quad_scene.frames[0].pose, loaded.frames[0].pose)
    k1, k2 = quad_scene.intrinsics, loaded.intrinsics
    assert (k1.fx, k1.fy, k1.cx, k1.cy, k1.width, k1.height) == (k2.fx, k2.fy, k2.cx, k2.cy, k2.width, k2.height)


def test_round_trip_random_poses(tmp_path):
    rng = np.random.default_rng(3)
    scene = synthetic.quad_scene(16, 16, texture_resolution=16)
    frames = []
    for i in range(3):
        pose = np.eye(4)
        pose[:3, :3] = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        pose[:3, 3] = rng.normal(size=3)
        frames.append(Frame(i, scene.frames[0].rgb, scene.frames[0].depth, pose))
    scene = scene.with_frames(frames)
    save_scene(scene, tmp_path)
    loaded = load_scene(tmp_path)
    for f1, f2 in zip(scene.frames, loaded.frames):
        assert np.array_equal(f1.pose, f2.pose)


def test_mismatched_resolutions_rejected(tmp_path, quad_scene):
    fr = quad_scene.frames[0]
    small = Frame(1, fr.rgb[:16], fr.depth[:16], fr.pose)
    with pytest.raises(SceneError):
        Scene(quad_scene.mesh, (fr, small), quad_scene.intrinsics, 0.001).validate()


def test_millimeter_depth_converted_to_meters(tmp_path, quad_scene):
    save_scene(quad_scene, tmp_path)
    raw = np.full((32, 32), 1500.0 * 0.001)
    write_depth(tmp_path / "frames" / "0.depth.png", raw, 0.001)
    scene = load_scene(tmp_path, Config(depth_unit=0.001))
    assert np.allclose(scene.frames[0].depth, 1.5)


def test_missing_file_names_path(tmp_path, quad_scene):
    save_scene(quad_scene, tmp_path)
    (tmp_path / "frames" / "0.depth.png").unlink()
    with pytest.raises(SceneError, match="0.depth.png"):
        load_scene(tmp_path)


def test_non_orthonormal_pose_rejected(tmp_path, quad_scene):
    save_scene(quad_scene, tmp_path)
    bad = np.eye(4)
    bad[0, 0] = 1.01
    write_pose(tmp_path / "frames" / "0.pose.txt", bad)
    with pytest.raises(SceneError, match="pose"):
        load_scene(tmp_path)
    check_pose(np.eye(4))


def test_blur_score_constant_is_zero():
    assert blur_score(np.full((8, 9, 3), 0.4)) == 0.0


def test_blur_score_impulse_hand_convolution():
    img = np.zeros((5, 5, 3))
    img[2, 2] = 1.0
    # response: -4 at the center, +1 at four neighbors, 0 on the other 20 pixels
    values = np.array([-4.0] + [1.0] * 4 + [0.0] * 20)
    assert blur_score(img) == pytest.approx(values.var(), abs=1e-12)
    assert blur_score(img) == pytest.approx(0.8, abs=1e-12)


def test_blur_score_checker_sharper_than_blurred():
    import cv2
    checker = synthetic.checker_texture(64, 8)
    blurred = cv2.GaussianBlur(checker, (0, 0), 2.0)
    assert blur_score(checker) > blur_score(blurred)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (7, 9, 3), elements=st.floats(0, 1)))
def test_blur_score_transpose_invariant(img):
    assert blur_score(img) == pytest.approx(blur_score(img.transpose(1, 0, 2)), rel=1e-9, abs=1e-12)


def test_filter_frames_behaviour(quad_scene):
    fr = quad_scene.frames[0]
    flat = Frame(1, np.full_like(fr.rgb, 0.5), fr.depth, fr.pose)
    scene = quad_scene.with_frames([fr, flat])
    assert len(filter_frames(scene, 0.0).frames) == 2
    kept = filter_frames(scene, 1e-12)
    assert [f.id for f in kept.frames] == [0]
    assert [f.id for f in filter_frames(kept, 1e-12).frames] == [0]  # idempotent
    with pytest.raises(SceneError, match="lower"):
        filter_frames(scene, 1e9)


def test_config_invariants():
    cfg = Config()
    assert cfg.pyramid_heights == [256, 432, 608, 784]
    assert cfg.num_levels == 4
    with pytest.raises(ConfigError):
        Config(pyramid_heights=[256, 256])
    with pytest.raises(ConfigError):
        Config(theta_d=0)
    with pytest.raises(ConfigError):
        Config(theta_a=0)
    with pytest.raises(ConfigError):
        Config.from_dict({"no_such_key": 1})


def test_config_defaults():
    cfg = Config()
    # published hyperparameters for room-scale scenes
    assert (cfg.lambda_content, cfg.lambda_style, cfg.lambda_reg) == (70.0, 1e-4, 5000.0)
    assert (cfg.theta_min, cfg.theta_a, cfg.theta_d) == (32.0, 30.0, 0.25)
    assert (cfg.texture_resolution, cfg.texture_levels) == (4096, 4)
    assert (cfg.epochs, cfg.frame_repeats) == (7, 10)
    assert (cfg.lr, cfg.lr_decay, cfg.lr_decay_every) == (1.0, 0.1, 3)
    assert cfg.style_min_size == 256


def test_config_yaml_round_trip(tmp_path):
    cfg = Config(theta_d=0.2, theta_a=40.0)
    cfg.save(tmp_path / "c.yaml")
    again = Config.load(tmp_path / "c.yaml")
    assert again == cfg and again.hash() == cfg.hash()
