"""Warp tests against per-pixel brute-force references and rendered scenes."""

import numpy as np
import pytest

from warpopt.geometry import Intrinsics, PoseSE3, invert, pose_to_transform
from warpopt.synth import preset_static, render_sequence
from warpopt.warp import (
    forward_warp,
    forward_warp_mask,
    inverse_warp,
    scale_consistent_depth,
    upsample_raster,
)


def unit_K(width, height):
    return Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=width, height=height)


def brute_force_inverse_warp(src, depth_tgt, T, K):
    """Independent loop implementation of grid sampling."""
    H, W = depth_tgt.shape
    out = np.zeros((H, W), dtype=float)
    valid = np.zeros((H, W), dtype=bool)
    for v in range(H):
        for u in range(W):
            d = depth_tgt[v, u]
            if d <= 0:
                continue
            X = np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])
            Xp = T[:3, :3] @ X + T[:3, 3]
            if Xp[2] <= 1e-6:
                continue
            us = K.fx * Xp[0] / Xp[2] + K.cx
            vs = K.fy * Xp[1] / Xp[2] + K.cy
            if not (0 <= us <= W - 1 and 0 <= vs <= H - 1):
                continue
            u0, v0 = int(np.floor(us)), int(np.floor(vs))
            du, dv = us - u0, vs - v0
            acc = 0.0
            for oi, oj, w in ((0, 0, (1 - du) * (1 - dv)), (1, 0, du * (1 - dv)),
                              (0, 1, (1 - du) * dv), (1, 1, du * dv)):
                ui, vi = u0 + oi, v0 + oj
                if 0 <= ui < W and 0 <= vi < H:
                    acc += w * src[vi, ui]
            out[v, u] = acc
            valid[v, u] = True
    return out, valid


class TestInverseWarp:
    def test_identity_pose_returns_source(self):
        K = Intrinsics(fx=30, fy=30, cx=4.5, cy=3.5, width=10, height=8)
        rng = np.random.default_rng(0)
        src = rng.random((8, 10))
        depth = 2.0 + rng.random((8, 10))
        res = inverse_warp(src, depth, PoseSE3.identity(), K)
        assert res.valid.all()
        np.testing.assert_allclose(res.data, src, atol=1e-9)

    def test_two_pixel_shift(self):
        # Source content one pixel to the right of the target content: the
        # target-to-source point transform is a +1 translation in x.
        K = unit_K(2, 1)
        src = np.array([[0.3, 0.7]])
        depth = np.ones((1, 2))
        res = inverse_warp(src, depth, PoseSE3(tx=1.0), K)
        assert res.data[0, 0] == pytest.approx(0.7)
        assert res.valid[0, 0]
        assert not res.valid[0, 1]
        assert res.data[0, 1] == 0.0

    def test_matches_brute_force_random(self):
        K = Intrinsics(fx=20, fy=22, cx=7.0, cy=5.0, width=16, height=12)
        rng = np.random.default_rng(1)
        for trial in range(5):
            src = rng.random((12, 16))
            depth = 3.0 + 2.0 * rng.random((12, 16))
            pose = PoseSE3.from_params(np.concatenate([
                0.02 * rng.standard_normal(3), 0.2 * rng.standard_normal(3)]))
            T = pose_to_transform(pose)
            res = inverse_warp(src, depth, pose, K)
            ref, ref_valid = brute_force_inverse_warp(src, depth, T, K)
            np.testing.assert_array_equal(res.valid, ref_valid)
            np.testing.assert_allclose(res.data, ref, atol=1e-12)

    def test_warping_depth_payload(self):
        # The same sampler applies to depth maps (value-sampled aligned depth).
        K = Intrinsics(fx=25, fy=25, cx=5.0, cy=4.0, width=12, height=10)
        rng = np.random.default_rng(2)
        depth_src = 4.0 + rng.random((10, 12))
        depth_tgt = 4.0 + rng.random((10, 12))
        pose = PoseSE3(tx=0.1)
        res_depth = inverse_warp(depth_src, depth_tgt, pose, K)
        ref, _ = brute_force_inverse_warp(depth_src, depth_tgt,
                                          pose_to_transform(pose), K)
        np.testing.assert_allclose(res_depth.data, ref, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        K = unit_K(4, 4)
        with pytest.raises(ValueError):
            inverse_warp(np.zeros((4, 4)), np.ones((5, 4)), PoseSE3(), K)

    def test_invalid_target_depth_propagates(self):
        K = Intrinsics(fx=10, fy=10, cx=2.0, cy=2.0, width=5, height=5)
        src = np.ones((5, 5))
        depth = np.ones((5, 5))
        depth[2, 2] = 0.0
        res = inverse_warp(src, depth, PoseSE3.identity(), K)
        assert not res.valid[2, 2]
        assert res.data[2, 2] == 0.0


class TestForwardWarp:
    def test_identity_pose_no_holes(self):
        K = Intrinsics(fx=40, fy=40, cx=5.0, cy=4.0, width=12, height=9)
        rng = np.random.default_rng(3)
        src = rng.random((9, 12))
        depth = 5.0 * np.ones((9, 12))
        img, dep = forward_warp(src, depth, PoseSE3.identity(), K, alpha=1)
        assert img.valid.all()
        np.testing.assert_allclose(img.data, src, atol=1e-9)
        np.testing.assert_allclose(dep.data, depth, atol=1e-9)

    def test_shift_by_one_pixel(self):
        # 2x2 image, unit focal, depth 1, +1m in x: content shifts one pixel
        # right, the right column exits the view, the left column is a hole.
        K = unit_K(2, 2)
        src = np.array([[1.0, 2.0], [3.0, 4.0]])
        depth = np.ones((2, 2))
        img, _ = forward_warp(src, depth, PoseSE3(tx=1.0), K, alpha=1)
        assert not img.valid[0, 0] and not img.valid[1, 0]
        np.testing.assert_allclose(img.data[:, 1], [1.0, 3.0])
        assert img.valid[:, 1].all()

    def test_z_buffer_keeps_nearest(self):
        # Two source pixels collide on one target pixel; the depth-1 pixel
        # must win over the depth-2 pixel.
        K = unit_K(2, 1)
        src = np.array([[0.25, 0.75]])
        depth = np.array([[2.0, 1.0]])
        # u' = x/z: pixel 0 at (0,0,2) stays at u=0; pixel 1 at (1,0,1) maps
        # to u=1 -> shift it onto pixel 0 with tx = -1 applied to pixel 1 only
        # via pose: instead place both on u=0 using tx=-1 * z trick is not
        # rigid; use a pose with tx=-1: pixel0 -> x=-1 invalid(z=2 -> u=-0.5),
        # so craft directly: pixel0 (0,0,2) with tx=0 stays, pixel1 (1,0,1)
        # with tx=-1 lands on u=0. A rigid motion cannot move only one pixel,
        # so emulate the collision with a rotation-free pose and depths that
        # make both project to u=0: pixel1 (1,0,1) + tx=-1 -> (0,0,1) -> u=0;
        # pixel0 (0,0,2) + tx=-1 -> (-1,0,2) -> u=-0.5 -> rounds to 0? -0.5
        # rounds to 0 (nearest), so both collide on u=0 and depth 1 wins.
        img, dep = forward_warp(src, depth, PoseSE3(tx=-1.0), K, alpha=1)
        assert img.valid[0, 0]
        assert img.data[0, 0] == pytest.approx(0.75)
        assert dep.data[0, 0] == pytest.approx(1.0)

    def test_all_invalid_depth_gives_full_holes(self):
        K = unit_K(3, 3)
        img, dep = forward_warp(np.ones((3, 3)), np.zeros((3, 3)),
                                PoseSE3.identity(), K, alpha=1)
        assert not img.valid.any()
        assert img.hole_fraction == 1.0

    def test_alpha_below_one_rejected(self):
        K = unit_K(3, 3)
        with pytest.raises(ValueError):
            forward_warp(np.ones((3, 3)), np.ones((3, 3)), PoseSE3(), K, alpha=0)

    def test_static_scene_consistency_and_holes(self):
        # Rendered pair with GT depth/pose: forward warp of frame 1 must match
        # frame 2 on valid pixels; upsampling strictly shrinks the holes.
        seq = render_sequence(preset_static(seed=0))
        K = seq.intrinsics
        pose = seq.ego_pose(0)
        img1, d1 = seq.frames[0], seq.depths[0]
        img2 = seq.frames[1]
        res1, _ = forward_warp(img1, d1, pose, K, alpha=1)
        res2, _ = forward_warp(img1, d1, pose, K, alpha=2)
        err = np.abs(res2.data - img2)[res2.valid].mean()
        assert err < 2.0 / 255.0
        assert res2.hole_fraction < res1.hole_fraction

    def test_hole_fraction_non_increasing_in_alpha(self):
        seq = render_sequence(preset_static(seed=1))
        K = seq.intrinsics
        pose = seq.ego_pose(0)
        fracs = []
        for alpha in (1, 2, 4):
            res, _ = forward_warp(seq.frames[0], seq.depths[0], pose, K, alpha=alpha)
            fracs.append(res.hole_fraction)
        assert fracs[0] >= fracs[1] >= fracs[2]

    def test_inverse_forward_duality(self):
        # Forward warp with P and inverse warp with invert(P) agree where
        # both are valid, up to interpolation tolerance.
        seq = render_sequence(preset_static(seed=2))
        K = seq.intrinsics
        pose = seq.ego_pose(0)
        fw, _ = forward_warp(seq.frames[0], seq.depths[0], pose, K, alpha=2)
        iw = inverse_warp(seq.frames[0], seq.depths[1], invert(pose_to_transform(pose)), K)
        both = fw.valid & iw.valid
        assert both.mean() > 0.5
        err = np.abs(fw.data - iw.data)[both].mean()
        assert err < 2.0 / 255.0


class TestForwardWarpMask:
    def test_identity_keeps_mask(self):
        K = Intrinsics(fx=40, fy=40, cx=3.0, cy=3.0, width=8, height=8)
        mask = np.zeros((8, 8))
        mask[2:5, 3:6] = 1.0
        res = forward_warp_mask(mask, np.full((8, 8), 5.0), PoseSE3.identity(), K)
        np.testing.assert_array_equal(res.data, mask)

    def test_single_pixel_shift(self):
        K = unit_K(2, 2)
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        res = forward_warp_mask(mask, np.ones((2, 2)), PoseSE3(tx=1.0), K)
        assert res.data[0, 1] == 1.0
        assert res.data[1, 1] == 0.0

    def test_fractional_values_round_up(self):
        # Upsampling a mask edge produces fractional values; after the splat
        # they must come back as exactly 0 or 1, never in between.
        K = Intrinsics(fx=30, fy=30, cx=4.5, cy=4.5, width=10, height=10)
        mask = np.zeros((10, 10))
        mask[3:6, 3:6] = 1.0
        depth = np.full((10, 10), 4.0)
        res = forward_warp_mask(mask, depth, PoseSE3(tx=0.037, tz=0.21), K, alpha=2)
        vals = np.unique(res.data)
        assert set(vals.tolist()) <= {0.0, 1.0}
        assert res.data.sum() >= mask.sum()  # round-up never shrinks coverage

    def test_non_binary_mask_rejected(self):
        K = unit_K(2, 2)
        with pytest.raises(ValueError):
            forward_warp_mask(np.full((2, 2), 0.5), np.ones((2, 2)), PoseSE3(), K)


class TestScaleConsistentDepth:
    def test_identity(self):
        K = unit_K(4, 4)
        d = np.full((4, 4), 3.0)
        res = scale_consistent_depth(d, PoseSE3.identity(), K)
        np.testing.assert_allclose(res.data, d)

    def test_pure_z_translation_adds(self):
        K = Intrinsics(fx=10, fy=10, cx=1.5, cy=1.5, width=4, height=4)
        d = np.full((4, 4), 4.0)
        res = scale_consistent_depth(d, PoseSE3(tz=1.0), K)
        np.testing.assert_allclose(res.data, 5.0)
        assert res.valid.all()

    def test_in_plane_translation_keeps_depth(self):
        K = Intrinsics(fx=10, fy=10, cx=1.5, cy=1.5, width=4, height=4)
        d = np.full((4, 4), 4.0)
        res = scale_consistent_depth(d, PoseSE3(tx=2.0), K)
        np.testing.assert_allclose(res.data, 4.0)


class TestUpsampleRaster:
    def test_alpha_one_is_copy(self):
        r = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(upsample_raster(r, 1), r)

    def test_even_samples_hit_original_pixels(self):
        rng = np.random.default_rng(4)
        r = rng.random((5, 7))
        up = upsample_raster(r, 2)
        np.testing.assert_allclose(up[::2, ::2], r, atol=1e-12)
