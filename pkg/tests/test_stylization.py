import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from scenestyle import synthetic
from tests.test_features import gram_oracle
from scenestyle.config import Config
from scenestyle.features import CONTENT_TAP, STYLE_TAPS, TestExtractor, downsample_mask, extract_features, masked_gram
from scenestyle.rasterizer import GBuffer, RenderPyramid, build_render_pyramid, rasterize_gbuffer
from scenestyle.stylization import (
    DepthLevelAssignment, NoVisibleGeometry, angle_mask, assign_levels, blend_weights, build_style_targets,
    compute_depth_levels, content_loss, erode_levels, level_weights, nearest_levels, optimal_height,
    second_levels, style_loss, style_scales,
)

PAPER_HEIGHTS = [256, 432, 608, 784]


def flat_gbuffer(depth: np.ndarray, cos=None, coverage=None) -> GBuffer:
    depth = np.asarray(depth, np.float32)
    cov = depth > 0 if coverage is None else coverage
    cos = np.where(cov, 1.0 if cos is None else cos, 0.0).astype(np.float32)
    uv = np.zeros(depth.shape + (2,), np.float32)
    return GBuffer(uv, np.where(cov, depth, 0).astype(np.float32), cos, cov)


def assignment_for(depths: list[np.ndarray], heights, **cfg) -> DepthLevelAssignment:
    config = Config(pyramid_heights=list(heights), **cfg)
    pyr = RenderPyramid([flat_gbuffer(d) for d in depths], list(heights))
    return compute_depth_levels(pyr, config)


# -- depth levels -------------------------------------------------------------------


def test_optimal_height_default_constants_depth_two():
    R = optimal_height(np.array([2.0]), 32, 0.25)
    assert R[0] == 256.0
    n = nearest_levels(R, PAPER_HEIGHTS)
    assert n[0] == 0
    assert blend_weights(R, n, second_levels(R, n, PAPER_HEIGHTS), PAPER_HEIGHTS)[0] == 1.0


def test_optimal_height_default_constants_depth_four():
    R = optimal_height(np.array([4.0]), 32, 0.25)
    assert R[0] == 512.0
    n = nearest_levels(R, PAPER_HEIGHTS)
    s = second_levels(R, n, PAPER_HEIGHTS)
    assert (n[0], s[0]) == (1, 2)
    w = blend_weights(R, n, s, PAPER_HEIGHTS)[0]
    assert w == pytest.approx(1 - 80 / 176, abs=1e-12)
    assert round(w, 3) == 0.545


def test_nearest_tie_goes_to_lower_resolution():
    R = np.array([344.0])  # halfway between 256 and 432
    assert nearest_levels(R, PAPER_HEIGHTS)[0] == 0


def test_uniform_depth_single_level_before_erosion():
    a = assignment_for([np.full((12, 12), 4.0)] * 2, [256, 432, 608, 784][:2], erode_levels=False)
    masks = a.level_masks
    assert sum(m.any() for m in masks) == 1


def test_isolated_pixel_eroded_to_coarser_level():
    idx = np.ones((5, 5), int)
    idx[2, 2] = 2
    cov = np.ones((5, 5), bool)
    out = erode_levels(idx, cov, sentinel=4)
    assert out[2, 2] == 1 and (out == 1).all()


def erosion_oracle(index, coverage, sentinel):
    h, w = index.shape
    out = np.full((h, w), -1)
    for y in range(h):
        for x in range(w):
            if not coverage[y, x]:
                continue
            best = sentinel
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    v = index[yy, xx] if coverage[yy, xx] else sentinel
                    best = min(best, v)
            out[y, x] = best
    return out


def test_erosion_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx = rng.integers(0, 4, (7, 9))
        cov = rng.random((7, 9)) < 0.8
        assert np.array_equal(erode_levels(idx, cov, 4), erosion_oracle(idx, cov, 4))


def test_zero_depth_treated_as_uncovered():
    depth = np.full((4, 4), 2.0, np.float32)
    depth[0, 0] = 0.0
    gb = flat_gbuffer(depth, coverage=np.ones((4, 4), bool))
    R, nearest, _, _, cov = assign_levels(gb, [32, 64], Config(pyramid_heights=[32, 64]))
    assert not cov[0, 0] and nearest[0, 0] == -1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 2 ** 31 - 1))
def test_optimal_height_scale_equivalence(k, seed):
    depth = np.random.default_rng(seed).uniform(0.5, 8.0, (6, 6))
    a = optimal_height(depth * k, 32, 0.25)
    b = optimal_height(depth, 32, 0.25 / k)
    assert np.allclose(a, b, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 2000.0))
def test_blend_weight_range_and_anchor(R):
    R = np.array([R])
    n = nearest_levels(R, PAPER_HEIGHTS)
    s = second_levels(R, n, PAPER_HEIGHTS)
    w = blend_weights(R, n, s, PAPER_HEIGHTS)
    assert 0.5 - 1e-12 <= w[0] <= 1.0  # the nearest level always dominates
    assert n[0] != s[0]


# -- angle mask ---------------------------------------------------------------------


def test_angle_mask_frontal_equals_coverage():
    mesh = synthetic.quad_mesh(2.0, 1.0, 1.0)
    k = synthetic.default_intrinsics(16, 16, 53.13)
    gb = rasterize_gbuffer(mesh, np.eye(4), k, 16, view_direction="camera_axis")
    assert np.array_equal(angle_mask(gb, 30.0), gb.coverage)


def test_angle_mask_tilted_45_is_empty():
    a = math.radians(45)
    rect = synthetic.Rect(np.array([-1.0 * math.cos(a), -1.0, 2.0 - math.sin(a)]),
                          np.array([2 * math.cos(a), 0.0, 2 * math.sin(a)]), np.array([0.0, 2.0, 0.0]))
    mesh = synthetic.mesh_from_rects([rect], gutter=0.0)
    k = synthetic.default_intrinsics(16, 16, 40.0)
    gb = rasterize_gbuffer(mesh, np.eye(4), k, 16, view_direction="camera_axis")
    assert gb.coverage.any()
    assert not angle_mask(gb, 30.0).any()
    assert np.array_equal(angle_mask(gb, 90.0), gb.coverage)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 89.0), st.floats(1.0, 89.0), st.integers(0, 2 ** 31 - 1))
def test_angle_mask_monotone(t1, t2, seed):
    rng = np.random.default_rng(seed)
    cos = rng.random((6, 6)).astype(np.float32)
    gb = flat_gbuffer(np.ones((6, 6)), cos=cos, coverage=rng.random((6, 6)) < 0.8)
    lo, hi = sorted((t1, t2))
    assert (angle_mask(gb, hi) | ~angle_mask(gb, lo)).all()


# -- style targets ------------------------------------------------------------------


@pytest.mark.parametrize("size,fine,coarse", [
    ((1024, 1024), (256, 256), (1024, 1024)),
    ((512, 512), (256, 256), (512, 512)),
    ((1024, 2048), (256, 512), (1024, 2048)),
])
def test_style_scales(size, fine, coarse):
    h, w = size
    n_fine, n_coarse = style_scales(h, w, 256)
    assert (h >> n_fine, w >> n_fine) == fine
    assert (h >> n_coarse, w >> n_coarse) == coarse


def test_style_targets_images_and_warning(extractor32):
    img = synthetic.red_circles_style(64)
    t = build_style_targets(img, extractor32, min_size=16)
    assert tuple(t.fine_image.shape[-2:]) == (16, 16)
    assert tuple(t.coarse_image.shape[-2:]) == (64, 64)
    assert not t.warnings
    small = build_style_targets(img[:32, :32], extractor32, min_size=64)
    assert small.warnings and small.fine_image.shape[-1] == 32 and small.coarse_image.shape[-1] == 32
    for tap in STYLE_TAPS:
        assert torch.allclose(t.fine[tap].matrix, t.fine[tap].matrix.T)


# -- level weights ------------------------------------------------------------------


def masks_assignment(masks):
    n = len(masks)
    nearest = [np.where(m, l, -1) for l, m in enumerate(masks)]
    zeros = [np.zeros(m.shape) for m in masks]
    return DepthLevelAssignment(list(range(16, 16 * (n + 1), 16)), zeros, nearest, nearest, zeros,
                                [np.ones(m.shape, bool) for m in masks])


def test_level_weights_single_and_pair():
    m = np.zeros((32, 32), bool)
    m[:16] = True
    lw = level_weights(masks_assignment([m, np.zeros((32, 32), bool)]), min_positions=1)
    assert lw.w_hat.tolist() == [1.0, 0.0]
    a = np.zeros((32, 32), bool)
    a.reshape(-1)[: int(0.1 * 1024)] = True
    b = np.zeros((32, 32), bool)
    b.reshape(-1)[: int(0.3 * 1024)] = True
    lw = level_weights(masks_assignment([a, b]), min_positions=0)
    wa, wb = a.mean(), b.mean()
    assert lw.w_hat == pytest.approx([wa / (wa + wb), wb / (wa + wb)], abs=1e-12)
    assert abs(lw.w_hat.sum() - 1) < 1e-6


def test_level_weights_tiny_part_skipped():
    big = np.ones((64, 64), bool)
    tiny = np.zeros((64, 64), bool)
    tiny[:16, :16] = True  # one position at the stride-16 tap
    mid = np.zeros((64, 64), bool)
    mid[:, :32] = True
    lw = level_weights(masks_assignment([big, tiny, mid]), min_positions=4)
    assert lw.skipped == [1]
    raw = np.array([big.mean(), 0.0, mid.mean()])
    assert lw.w_hat == pytest.approx(raw / raw.sum(), abs=1e-12)
    assert abs(lw.w_hat.sum() - 1) < 1e-6


def test_level_weights_all_empty_raises():
    with pytest.raises(NoVisibleGeometry):
        level_weights(masks_assignment([np.zeros((32, 32), bool)]), min_positions=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_level_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    masks = [rng.random((32, 32)) < rng.uniform(0.2, 1.0) for _ in range(3)]
    lw = level_weights(masks_assignment(masks), min_positions=0)
    assert abs(lw.w_hat.sum() - 1.0) < 1e-6
    assert (lw.w_hat >= 0).all()


# -- losses -------------------------------------------------------------------------


def two_level_setup(seed=0):
    rng = np.random.default_rng(seed)
    shapes = [(32, 32), (48, 48)]
    images = [torch.from_numpy(rng.random((3,) + s)) for s in shapes]
    depth_lo = np.where(rng.random(shapes[0]) < 0.5, 1.0, 3.0)
    depth_hi = np.where(rng.random(shapes[1]) < 0.5, 1.0, 3.0)
    a = assignment_for([depth_lo, depth_hi], [32, 48], theta_min=16.0, theta_d=1.0, erode_levels=False)
    angle = [rng.random(s) < 0.7 for s in shapes]
    return images, a, angle


def style_oracle(images, masks, angle, targets, w_hat, extractor):
    total = 0.0
    for l, img in enumerate(images):
        if w_hat[l] == 0:
            continue
        feats = extract_features(img, extractor)
        for tap in STYLE_TAPS:
            f = feats[tap].numpy()
            s = 2 ** STYLE_TAPS.index(tap)
            shape = (img.shape[1] // s, img.shape[2] // s)
            mc = downsample_mask(masks[l], shape)
            mf = downsample_mask(masks[l] & angle[l], shape)
            for target, m in ((targets.coarse[tap], mc), (targets.fine[tap], mf)):
                if not m.any():
                    continue
                g, _ = gram_oracle(f, m)
                total += w_hat[l] * ((target.matrix.numpy() - g) ** 2).sum()
    return total


def test_style_loss_matches_per_part_oracle(extractor64):
    images, a, angle = two_level_setup()
    targets = build_style_targets(synthetic.red_circles_style(64), extractor64, 16, torch.float64)
    w_hat = level_weights(a, min_positions=0).w_hat
    loss = float(style_loss(images, a, angle, targets, w_hat, extractor64))
    ref = style_oracle(images, a.level_masks, angle, targets, w_hat, extractor64)
    assert loss == pytest.approx(ref, rel=1e-5)


def test_style_loss_single_weight_equals_single_level(extractor64):
    images, a, angle = two_level_setup(1)
    targets = build_style_targets(synthetic.red_circles_style(64), extractor64, 16, torch.float64)
    full = style_loss(images, a, angle, targets, np.array([1.0, 0.0]), extractor64)
    ref = style_oracle(images[:1], a.level_masks[:1], angle[:1], targets, [1.0], extractor64)
    assert float(full) == pytest.approx(ref, rel=1e-9)


def test_style_loss_zero_at_fixed_point(extractor64):
    img = torch.from_numpy(synthetic.red_circles_style(32).transpose(2, 0, 1).copy()).double()
    targets = build_style_targets(img.permute(1, 2, 0).numpy(), extractor64, 32, torch.float64)
    a = assignment_for([np.ones((32, 32))], [32], theta_min=32.0, theta_d=1.0)
    loss = style_loss([img], a, [np.ones((32, 32), bool)], targets, np.array([1.0]), extractor64)
    assert float(loss) < 1e-18


def test_style_loss_invariant_to_pixel_shuffle_within_mask():
    # 1x1 convolutions only see single pixels, so a shuffle permutes feature positions exactly
    ext = TestExtractor(channels=(4, 4, 4, 4, 4), seed=1, dtype=torch.float64)
    for conv in ext.convs:
        w = conv.weight.data
        conv.weight.data = torch.zeros_like(w)
        conv.weight.data[:, :, 1, 1] = w[:, :, 1, 1]
    img = torch.rand(3, 16, 16, dtype=torch.float64)
    a = assignment_for([np.ones((16, 16))], [16], theta_min=16.0, theta_d=1.0)
    targets = build_style_targets(synthetic.red_circles_style(32), ext, 16, torch.float64)
    base = style_loss([img], a, None, targets, np.array([1.0]), ext)
    # swap whole 16x16 quadrants so every pooling window keeps its content
    shuffled = img.clone()
    shuffled[:, :8, :8], shuffled[:, 8:, 8:] = img[:, 8:, 8:], img[:, :8, :8]
    moved = style_loss([shuffled], a, None, targets, np.array([1.0]), ext)
    assert float(moved) == pytest.approx(float(base), rel=1e-9)


def content_oracle(images, frame, masks, w_hat, extractor):
    import torch.nn.functional as F
    total = 0.0
    for l, img in enumerate(images):
        if w_hat[l] == 0:
            continue
        target = F.interpolate(torch.from_numpy(frame.transpose(2, 0, 1).copy())[None].double(),
                               size=img.shape[-2:], mode="bilinear", align_corners=False)[0]
        f_hat = extract_features(img, extractor)[CONTENT_TAP].numpy()
        f = extract_features(target, extractor)[CONTENT_TAP].numpy()
        m = downsample_mask(masks[l], f.shape[-2:])
        if m.sum() == 0:
            continue
        total += w_hat[l] * ((f[:, m] - f_hat[:, m]) ** 2).sum() / m.sum()
    return total


def test_content_loss_matches_masked_mse_oracle(extractor64):
    for seed in range(3):
        images, a, _ = two_level_setup(seed)
        frame = np.random.default_rng(seed + 10).random((40, 40, 3))
        w_hat = level_weights(a, min_positions=0).w_hat
        loss = float(content_loss(images, frame, a, w_hat, extractor64))
        assert loss == pytest.approx(content_oracle(images, frame, a.level_masks, w_hat, extractor64), rel=1e-5)


def test_content_loss_zero_for_identical_image(extractor64):
    img = np.random.default_rng(0).random((32, 32, 3))
    a = assignment_for([np.ones((32, 32))], [32], theta_min=32.0, theta_d=1.0)
    t = torch.from_numpy(img.transpose(2, 0, 1).copy())
    assert float(content_loss([t], img, a, np.array([1.0]), extractor64)) < 1e-20
