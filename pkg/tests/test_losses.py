import numpy as np
import pytest

from conftest import random_rgbd, randomized_net
from multidepth import rnet
from multidepth.core import CameraIntrinsics, DepthMap, NumericError, Rng
from multidepth.losses import (
    LossWeights, huber, huber_with_grad, lambda_mse, lambda_mse_with_grad,
    pud_consistency, seg_consistency, spherical_error, sub_consistency, total_loss,
)
from multidepth.sampling import SamplerConfig, build_sample_batch, pud_crop_origin

K = CameraIntrinsics(20.0, 22.0, 7.5, 7.5)


def _spherical_oracle(depth, k):
    """Direct per-pixel (theta, phi, ln z) evaluation, independent of geometry.py."""
    h, w = depth.shape
    out = np.zeros((3, h, w))
    for y in range(h):
        for x in range(w):
            u = (x - k.cx) / k.fx
            v = (y - k.cy) / k.fy
            n = np.sqrt(u * u + v * v + 1.0)
            out[0, y, x] = np.arctan2(u / n, 1.0 / n)
            out[1, y, x] = np.arcsin(v / n)
            out[2, y, x] = np.log(float(depth[y, x]))
    return out


def test_lambda_mse_zero_for_equal_maps():
    _, d = random_rgbd(0, 8, 8)
    assert lambda_mse(d, d, K) == 0.0


def test_lambda_mse_unit_lambda_equals_direct_mse():
    rng = Rng(1)
    gt = rng.uniform(1, 3, (8, 8)).astype(np.float32)
    pred = (gt * np.exp(rng.normal(0, 0.1, (8, 8)))).astype(np.float32)
    loss = lambda_mse(DepthMap.full(pred), DepthMap.full(gt), K, lam=(1.0, 1.0, 1.0))
    eps = _spherical_oracle(pred, K) - _spherical_oracle(gt, K)
    direct_mse = sum(float(np.mean(eps[c] ** 2)) for c in range(3))
    assert abs(loss - direct_mse) < 1e-10


def test_lambda_mse_zero_lambda_is_pure_variance():
    rng = Rng(2)
    gt = rng.uniform(1, 3, (8, 8)).astype(np.float32)
    pred = (gt * np.exp(rng.normal(0, 0.1, (8, 8)))).astype(np.float32)
    loss = lambda_mse(DepthMap.full(pred), DepthMap.full(gt), K, lam=(0.0, 0.0, 0.0))
    eps = _spherical_oracle(pred, K) - _spherical_oracle(gt, K)
    direct_var = sum(float(np.mean(eps[c] ** 2) - np.mean(eps[c]) ** 2) for c in range(3))
    assert abs(loss - direct_var) < 1e-10


def test_lambda_mse_needs_two_pixels():
    d1 = DepthMap(np.array([[1.0, 0.0]], dtype=np.float32), np.array([[True, False]]))
    with pytest.raises(ValueError):
        lambda_mse(d1, d1, K)


def test_lambda_mse_grad_matches_fd():
    rng = Rng(3)
    gt = DepthMap.full(rng.uniform(1, 3, (6, 6)).astype(np.float32))
    pred = (gt.depth * np.exp(rng.normal(0, 0.1, (6, 6)))).astype(np.float64)
    valid = np.ones((6, 6), dtype=bool)
    loss, grad = lambda_mse_with_grad(pred, valid, gt, K, (1.0, 1.0, 0.7))
    h = 1e-6
    for (y, x) in [(0, 0), (3, 2), (5, 5)]:
        p = pred.copy()
        p[y, x] += h
        lp = lambda_mse_with_grad(p, valid, gt, K, (1.0, 1.0, 0.7))[0]
        p[y, x] -= 2 * h
        lm = lambda_mse_with_grad(p, valid, gt, K, (1.0, 1.0, 0.7))[0]
        np.testing.assert_allclose((lp - lm) / (2 * h), grad[y, x], rtol=1e-5)


# ---------------------------------------------------------------- huber

def test_huber_zero_for_equal():
    a = np.full((4, 4), 2.0)
    assert huber(a, a.copy(), 1.0) == 0.0


def test_huber_branch_continuity_exact():
    delta = 0.7
    a = np.array([[delta]])
    b = np.array([[0.0]])
    quad = 0.5 * delta * delta
    lin = delta * (delta - 0.5 * delta)
    assert huber(a, b, delta) == quad == lin


def test_huber_two_delta_closed_form():
    delta = 0.6
    a = np.array([[2 * delta]])
    b = np.array([[0.0]])
    np.testing.assert_allclose(huber(a, b, delta), 1.5 * delta * delta, rtol=1e-12)


def test_huber_empty_mask_errors():
    a = np.zeros((2, 2))
    with pytest.raises(ValueError):
        huber(a, a, 1.0, np.zeros((2, 2), dtype=bool))


def test_huber_grad_signs_and_fd():
    rng = Rng(4)
    a = rng.normal(0, 2, (5, 5))
    b = rng.normal(0, 2, (5, 5))
    loss, grad = huber_with_grad(a, b, 1.0)
    h = 1e-7
    for (y, x) in [(0, 0), (2, 3), (4, 4)]:
        ap = a.copy()
        ap[y, x] += h
        lp = huber_with_grad(ap, b, 1.0)[0]
        ap[y, x] -= 2 * h
        lm = huber_with_grad(ap, b, 1.0)[0]
        np.testing.assert_allclose((lp - lm) / (2 * h), grad[y, x], rtol=1e-4, atol=1e-12)


# ---------------------------------------------------------------- consistency

def _net_refine_fn(weights, cfg):
    return lambda rgb, depth: rnet.refine(weights, cfg, rgb, depth, 0.0)


def test_pud_consistency_identity_refiner_zero(identity_refine):
    rgb, depth = random_rgbd(5, 8, 8)
    assert pud_consistency(identity_refine, rgb, depth, 2) == 0.0


def test_pud_consistency_s1_zero():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 6)
    rgb, depth = random_rgbd(6, 8, 8)
    assert pud_consistency(_net_refine_fn(w, cfg), rgb, depth, 1) == 0.0


def test_pud_consistency_matches_recomposition_oracle():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 7, scale=0.3)
    rgb, depth = random_rgbd(7, 8, 8)
    fn = _net_refine_fn(w, cfg)
    s, delta = 2, 1.0
    got = pud_consistency(fn, rgb, depth, s, delta)
    # oracle: refine subs, recompose by direct indexing, per-branch huber means
    full_pred = fn(rgb, depth)
    y0, x0, ch, cw = pud_crop_origin(depth.height, depth.width, s)
    branch_losses = []
    from multidepth.sampling import pixel_unshuffle, pixel_unshuffle_depth
    subs_rgb = pixel_unshuffle(rgb, s)
    subs_d = pixel_unshuffle_depth(depth, s)
    for i in range(s * s):
        pred = fn(subs_rgb[i], subs_d[i])
        acc = []
        for yy in range(pred.height):
            for xx in range(pred.width):
                fy, fx = y0 + s * yy + i // s, x0 + s * xx + i % s
                r = float(pred.depth[yy, xx]) - float(full_pred.depth[fy, fx])
                acc.append(0.5 * r * r if abs(r) <= delta else delta * (abs(r) - 0.5 * delta))
        branch_losses.append(float(np.mean(acc)))
    np.testing.assert_allclose(got, float(np.mean(branch_losses)), rtol=1e-6)


def _crop_samples(rgb, depth, n, seed):
    cfg = SamplerConfig(n_r=n, n_s=0, s_pud=1, crop_scale_range=(0.4, 0.9))
    return [s for s in build_sample_batch(rgb, depth, None, cfg, Rng(seed)) if s.kind == "crop"]


def test_sub_consistency_identity_zero(identity_refine):
    rgb, depth = random_rgbd(8, 10, 10)
    samples = _crop_samples(rgb, depth, 3, 0)
    assert sub_consistency(identity_refine, samples, depth) == 0.0


def test_sub_consistency_full_crop_zero():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 9, scale=0.3)
    rgb, depth = random_rgbd(9, 8, 8)
    fn = _net_refine_fn(w, cfg)
    full_pred = fn(rgb, depth)
    scfg = SamplerConfig(n_r=1, n_s=0, s_pud=1, crop_scale_range=(1.0, 1.0),
                         jitter_brightness=0.0, jitter_contrast=0.0)
    samples = [s for s in build_sample_batch(rgb, depth, None, scfg, Rng(1)) if s.kind == "crop"]
    assert sub_consistency(fn, samples, full_pred) == 0.0


def test_sub_consistency_matches_unbatched_oracle():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 10, scale=0.3)
    rgb, depth = random_rgbd(10, 12, 12)
    fn = _net_refine_fn(w, cfg)
    full_pred = fn(rgb, depth)
    samples = _crop_samples(rgb, depth, 4, 2)
    got = sub_consistency(fn, samples, full_pred, delta=1.0)
    per_crop = []
    for s in samples:
        x, y, cw, chh = s.rect
        pred = fn(s.rgb, s.depth)
        diffs = pred.depth.astype(np.float64) - full_pred.depth[y:y + chh, x:x + cw].astype(np.float64)
        r = diffs.ravel()
        vals = np.where(np.abs(r) <= 1.0, 0.5 * r * r, np.abs(r) - 0.5)
        per_crop.append(float(vals.mean()))
    np.testing.assert_allclose(got, float(np.mean(per_crop)), rtol=1e-6)


def test_seg_consistency_identity_zero(identity_refine):
    rgb, depth = random_rgbd(11, 8, 8)
    from multidepth.formats import MaskSet
    from multidepth.sampling import select_masks
    m = np.zeros((8, 8), dtype=bool)
    m[2:6, 2:6] = True
    samples = select_masks(MaskSet(8, 8, [("m", m)]), rgb, depth, 1, Rng(3))
    assert seg_consistency(identity_refine, samples, depth) == 0.0


def test_seg_consistency_degenerate_mask_skipped():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 12, scale=0.3)
    rgb, _ = random_rgbd(12, 8, 8)
    # depth invalid exactly on the mask: the sample has no valid depth
    m = np.zeros((8, 8), dtype=bool)
    m[0:2, 0:2] = True
    depth = DepthMap(np.where(~m, 2.0, 0).astype(np.float32), ~m)
    from multidepth.formats import MaskSet
    from multidepth.sampling import select_masks
    samples = select_masks(MaskSet(8, 8, [("m", m)]), rgb, depth, 1, Rng(4))
    assert seg_consistency(_net_refine_fn(w, cfg), samples, depth) == 0.0


def test_seg_consistency_matches_masked_oracle():
    cfg = rnet.RNetConfig(levels=1, base_channels=4)
    w = randomized_net(cfg, 13, scale=0.3)
    rgb, depth = random_rgbd(13, 8, 8)
    fn = _net_refine_fn(w, cfg)
    full_pred = fn(rgb, depth)
    m = np.zeros((8, 8), dtype=bool)
    m[1:7, 3:8] = True
    from multidepth.formats import MaskSet
    from multidepth.sampling import select_masks
    samples = select_masks(MaskSet(8, 8, [("m", m)]), rgb, depth, 1, Rng(5))
    got = seg_consistency(fn, samples, full_pred, delta=1.0)
    pred = fn(samples[0].rgb, samples[0].depth)
    acc = []
    for y in range(8):
        for x in range(8):
            if m[y, x]:
                r = float(pred.depth[y, x]) - float(full_pred.depth[y, x])
                acc.append(0.5 * r * r if abs(r) <= 1.0 else abs(r) - 0.5)
    np.testing.assert_allclose(got, float(np.mean(acc)), rtol=1e-6)


# ---------------------------------------------------------------- total

def test_total_loss_sample_weights_zero():
    lw = LossWeights(lam_sample=(0.0, 0.0, 0.0))
    total, breakdown = total_loss({"lambda_mse": 0.42, "pud": 9.0, "sub": 9.0, "sam": 9.0}, lw)
    assert total == 0.42


def test_total_loss_arithmetic():
    lw = LossWeights()
    total, breakdown = total_loss({"lambda_mse": 0.4, "pud": 0.1, "sub": 0.2, "sam": 0.3}, lw)
    np.testing.assert_allclose(total, 1.0, rtol=1e-12)
    np.testing.assert_allclose(breakdown["sample"], 0.6, rtol=1e-12)


def test_total_loss_rejects_non_finite():
    with pytest.raises(NumericError):
        total_loss({"lambda_mse": float("nan")}, LossWeights())


def test_spherical_error_shape():
    _, d = random_rgbd(14, 6, 6, holes=0.3)
    err = spherical_error(d, d, K)
    assert err.eps.shape[0] == 3
    assert err.eps.shape[1] == int((d.valid & d.valid).sum())
