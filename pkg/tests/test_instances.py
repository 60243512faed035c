"""Mask algebra, region composition and depth-inconsistency checks."""

import numpy as np
import pytest

from warpopt.geometry import Intrinsics, PoseSE3, invert, pose_to_transform
from warpopt.instances import (
    InconsistencyMap,
    InstanceMaskSet,
    ScenePair,
    background_mask,
    compose_full,
    depth_inconsistency,
    merge_inconsistency,
    propagate_instance_mask,
    reconstruct_background,
    reconstruct_instance,
    union_valid_mask,
    weighted_valid_mask,
)
from warpopt.synth import preset_recovery, render_sequence
from warpopt.warp import WarpResult, forward_warp, forward_warp_mask, inverse_warp


def mask_set(shape, **kw):
    masks = {}
    for iid, pixels in kw.items():
        m = np.zeros(shape, dtype=np.uint8)
        for (r, c) in pixels:
            m[r, c] = 1
        masks[int(iid)] = m
    return InstanceMaskSet(masks)


class TestBackgroundMask:
    def test_no_instances_all_ones(self):
        m1 = InstanceMaskSet()
        m2 = InstanceMaskSet()
        bg = background_mask(m1, m2, shape=(2, 3))
        np.testing.assert_array_equal(bg, np.ones((2, 3), dtype=np.uint8))

    def test_union_over_both_frames(self):
        m1 = mask_set((1, 3), **{"1": [(0, 0)]})
        m2 = mask_set((1, 3), **{"1": [(0, 1)]})
        np.testing.assert_array_equal(background_mask(m1, m2), [[0, 0, 1]])

    def test_full_cover_all_zero(self):
        m1 = mask_set((1, 2), **{"1": [(0, 0)]})
        m2 = mask_set((1, 2), **{"1": [(0, 1)]})
        np.testing.assert_array_equal(background_mask(m1, m2), [[0, 0]])


class TestMaskSetInvariants:
    def test_overlapping_masks_rejected(self):
        a = np.zeros((2, 2)); a[0, 0] = 1
        with pytest.raises(ValueError):
            InstanceMaskSet({1: a, 2: a.copy()})

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            InstanceMaskSet({1: np.full((2, 2), 0.5)})

    def test_id_zero_reserved(self):
        with pytest.raises(ValueError):
            InstanceMaskSet({0: np.zeros((2, 2))})


class TestReconstruction:
    def K(self):
        return Intrinsics(fx=30, fy=30, cx=3.5, cy=3.5, width=8, height=8)

    def test_identity_ego_pose_masks_source(self):
        K = self.K()
        rng = np.random.default_rng(0)
        img = rng.random((8, 8))
        depth = np.full((8, 8), 5.0)
        bg = np.zeros((8, 8), dtype=np.uint8)
        bg[:, :4] = 1
        out = reconstruct_background(img, depth, PoseSE3.identity(), K, bg)
        np.testing.assert_allclose(out.data, img * bg, atol=1e-12)

    def test_all_zero_background_mask_annihilates(self):
        K = self.K()
        out = reconstruct_background(np.ones((8, 8)), np.full((8, 8), 2.0),
                                     PoseSE3.identity(), K, np.zeros((8, 8)))
        assert np.all(out.data == 0.0)
        assert not out.valid.any()

    def test_identity_object_pose_keeps_instance_image(self):
        K = self.K()
        rng = np.random.default_rng(1)
        inst = np.zeros((8, 8))
        inst[2:5, 2:5] = rng.random((3, 3))
        out = reconstruct_instance(inst, np.full((8, 8), 3.0), PoseSE3.identity(), K)
        np.testing.assert_allclose(out.data, inst, atol=1e-6)

    def test_empty_instance_image_gives_empty_output(self):
        K = self.K()
        out = reconstruct_instance(np.zeros((8, 8)), np.full((8, 8), 3.0),
                                   PoseSE3(tx=0.05), K)
        assert np.all(out.data == 0.0)

    def test_static_scene_background_matches_target(self):
        seq = render_sequence(preset_recovery(seed=1, n_objects=0))
        pair = seq.scene_pair(0)
        K = pair.intrinsics
        bg = background_mask(pair.masks1, pair.masks2, shape=pair.shape)
        pose_2_to_1 = invert(pose_to_transform(seq.ego_pose(0)))
        out = reconstruct_background(pair.image1, pair.depth2, pose_2_to_1, K, bg)
        target = pair.image2 * bg[..., None]
        err = np.abs(out.data - target)[out.valid].mean()
        assert err < 2.0 / 255.0


class TestPropagation:
    def test_identity_pose_same_mask(self):
        K = Intrinsics(fx=30, fy=30, cx=3.5, cy=3.5, width=8, height=8)
        m = np.zeros((8, 8)); m[3:6, 3:6] = 1
        out = propagate_instance_mask(m, np.full((8, 8), 4.0), PoseSE3.identity(), K)
        np.testing.assert_array_equal(out.data, m)

    def test_fractional_values_round_up(self):
        K = Intrinsics(fx=30, fy=30, cx=3.5, cy=3.5, width=8, height=8)
        m = np.zeros((8, 8)); m[3:6, 3:6] = 1
        # A sub-pixel in-plane shift produces fractional bilinear values.
        out = propagate_instance_mask(m, np.full((8, 8), 4.0), PoseSE3(tx=0.033), K)
        assert set(np.unique(out.data).tolist()) <= {0.0, 1.0}
        assert out.data.sum() >= m.sum()


class TestUnionAndComposition:
    def test_union_no_instances(self):
        bg = np.array([[0, 1]], dtype=np.uint8)
        np.testing.assert_array_equal(union_valid_mask(bg, []), bg)

    def test_union_hand_case(self):
        bg = np.array([[0, 0, 1]], dtype=np.uint8)
        inst = np.array([[1, 0, 0]], dtype=np.float64)
        np.testing.assert_array_equal(union_valid_mask(bg, [inst]), [[1, 0, 1]])

    def test_union_clamps_to_binary(self):
        bg = np.array([[1, 1]], dtype=np.uint8)
        inst = np.array([[1, 1]], dtype=np.float64)
        np.testing.assert_array_equal(union_valid_mask(bg, [inst]), [[1, 1]])

    def test_compose_disjoint_sum(self):
        bg = np.array([[0.5, 0.0, 0.0]])
        i1 = np.array([[0.0, 0.25, 0.0]])
        i2 = np.array([[0.0, 0.0, 0.125]])
        out, owner = compose_full(bg, [i1, i2])
        np.testing.assert_allclose(out, [[0.5, 0.25, 0.125]])
        assert owner is None

    def test_compose_overlap_nearer_instance_wins(self):
        shape = (1, 1)
        i1 = WarpResult(np.array([[0.3]]), np.ones(shape, bool))
        i2 = WarpResult(np.array([[0.9]]), np.ones(shape, bool))
        bg = WarpResult(np.zeros(shape), np.zeros(shape, bool))
        out, owner = compose_full(
            bg, [i1, i2],
            instance_masks=[np.ones(shape), np.ones(shape)],
            instance_depths=[np.array([[4.0]]), np.array([[2.0]])],
            bg_mask=np.zeros(shape, dtype=np.uint8))
        assert out[0, 0] == pytest.approx(0.9)
        assert owner[0, 0] == 2

    def test_compose_tie_breaks_to_lower_id(self):
        shape = (1, 1)
        i1 = WarpResult(np.array([[0.3]]), np.ones(shape, bool))
        i2 = WarpResult(np.array([[0.9]]), np.ones(shape, bool))
        bg = WarpResult(np.zeros(shape), np.zeros(shape, bool))
        out, owner = compose_full(
            bg, [i1, i2],
            instance_masks=[np.ones(shape), np.ones(shape)],
            instance_depths=[np.array([[2.0]]), np.array([[2.0]])],
            bg_mask=np.zeros(shape, dtype=np.uint8))
        assert owner[0, 0] == 1
        assert out[0, 0] == pytest.approx(0.3)

    def test_instance_order_does_not_matter(self):
        rng = np.random.default_rng(2)
        shape = (4, 4)
        bg = WarpResult(rng.random(shape), np.ones(shape, bool))
        m1 = np.zeros(shape); m1[0, 0] = 1
        m2 = np.zeros(shape); m2[2, 2] = 1
        i1 = WarpResult(rng.random(shape) * m1, m1.astype(bool))
        i2 = WarpResult(rng.random(shape) * m2, m2.astype(bool))
        d1 = np.full(shape, 3.0)
        d2 = np.full(shape, 5.0)
        bgm = np.ones(shape, dtype=np.uint8)
        a, _ = compose_full(bg, [i1, i2], [m1, m2], [d1, d2], bg_mask=bgm,
                            bg_depth=np.full(shape, 8.0))
        # permuted list with permuted ids gives the same composed image
        b, _ = compose_full(bg, [i2, i1], [m2, m1], [d2, d1], bg_mask=bgm,
                            bg_depth=np.full(shape, 8.0))
        np.testing.assert_allclose(a, b)


class TestDepthInconsistency:
    def test_equal_depths_zero(self):
        a = np.full((2, 2), 2.0)
        out = depth_inconsistency(a, a.copy(), np.ones((2, 2)))
        np.testing.assert_allclose(out.values, 0.0)
        assert out.valid.all()

    def test_hand_value(self):
        a = np.array([[1.0]])
        b = np.array([[3.0]])
        out = depth_inconsistency(a, b, np.ones((1, 1)))
        assert out.values[0, 0] == pytest.approx(0.5)

    def test_region_mask_annihilates(self):
        a = np.array([[1.0]])
        b = np.array([[3.0]])
        out = depth_inconsistency(a, b, np.zeros((1, 1)))
        assert out.values[0, 0] == 0.0
        assert not out.valid[0, 0]

    def test_invalid_depth_invalidates_pixel(self):
        a = WarpResult(np.array([[2.0, 0.0]]), np.array([[True, False]]))
        b = np.array([[2.0, 2.0]])
        out = depth_inconsistency(a, b, np.ones((1, 2)))
        assert out.valid[0, 0] and not out.valid[0, 1]

    def test_merge_sums_disjoint_regions(self):
        bg = InconsistencyMap(np.array([[0.1, 0.0]]), np.array([[True, False]]))
        inst = InconsistencyMap(np.array([[0.0, 0.3]]), np.array([[False, True]]))
        out = merge_inconsistency(bg, [inst])
        np.testing.assert_allclose(out.values, [[0.1, 0.3]])
        assert out.valid.all()

    def test_merge_empty_instances(self):
        bg = InconsistencyMap(np.array([[0.2]]), np.array([[True]]))
        out = merge_inconsistency(bg, [])
        np.testing.assert_allclose(out.values, bg.values)


class TestWeightedValidMask:
    def test_perfect_consistency(self):
        d = InconsistencyMap(np.zeros((1, 1)), np.ones((1, 1), bool))
        assert weighted_valid_mask(d, np.ones((1, 1)))[0, 0] == 1.0

    def test_hand_value(self):
        d = InconsistencyMap(np.full((1, 1), 0.25), np.ones((1, 1), bool))
        assert weighted_valid_mask(d, np.ones((1, 1)))[0, 0] == pytest.approx(0.75)

    def test_invalid_pixel_zero(self):
        d = InconsistencyMap(np.zeros((1, 1)), np.ones((1, 1), bool))
        assert weighted_valid_mask(d, np.zeros((1, 1)))[0, 0] == 0.0


class TestScenePair:
    def test_matched_ids_require_presence_in_both_frames(self):
        shape = (12, 12)
        K = Intrinsics(fx=10, fy=10, cx=5.5, cy=5.5, width=12, height=12)
        m1 = np.zeros(shape); m1[0:4, 0:4] = 1
        m2 = np.zeros(shape); m2[0:4, 1:5] = 1
        only1 = np.zeros(shape); only1[8:11, 8:11] = 1
        pair = ScenePair(
            image1=np.zeros(shape + (3,)), image2=np.zeros(shape + (3,)),
            depth1=np.ones(shape), depth2=np.ones(shape),
            masks1=InstanceMaskSet({1: m1, 2: only1}),
            masks2=InstanceMaskSet({1: m2}),
            intrinsics=K)
        assert pair.matched_ids() == [1]

    def test_small_instances_dropped(self):
        shape = (12, 12)
        K = Intrinsics(fx=10, fy=10, cx=5.5, cy=5.5, width=12, height=12)
        tiny = np.zeros(shape); tiny[0, 0] = 1
        pair = ScenePair(
            image1=np.zeros(shape + (3,)), image2=np.zeros(shape + (3,)),
            depth1=np.ones(shape), depth2=np.ones(shape),
            masks1=InstanceMaskSet({1: tiny}),
            masks2=InstanceMaskSet({1: tiny.copy()}),
            intrinsics=K)
        assert pair.matched_ids() == []
        assert pair.matched_ids(min_pixels=1) == [1]
