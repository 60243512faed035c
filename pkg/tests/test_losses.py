"""Loss-function checks against closed forms and hand arithmetic."""

import numpy as np
import pytest

from warpopt.geometry import Intrinsics, PointCloud, backproject
from warpopt.instances import InstanceMaskSet
from warpopt.losses import (
    HeightPrior,
    LossBreakdown,
    LossConfig,
    geometric_loss,
    height_loss,
    make_breakdown,
    mask_pixel_height,
    reconstruction_loss,
    smoothness_loss,
    ssim_map,
    total_loss,
    translation_loss,
    translation_prior,
)

C1 = 0.01 ** 2
C2 = 0.03 ** 2


class TestSSIM:
    def test_identical_images_give_one(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3))
        np.testing.assert_allclose(ssim_map(img, img), 1.0, atol=1e-12)

    def test_constant_images_closed_form(self):
        # a = 0, b = 1 everywhere: all variances vanish, so
        # SSIM = (2*0*1 + C1)(0 + C2) / ((0 + 1 + C1)(0 + C2)) = C1/(1 + C1).
        a = np.zeros((6, 6))
        b = np.ones((6, 6))
        expected = C1 / (1.0 + C1)
        np.testing.assert_allclose(ssim_map(a, b), expected, atol=1e-15)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.random((7, 9))
        b = rng.random((7, 9))
        np.testing.assert_allclose(ssim_map(a, b), ssim_map(b, a), atol=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ssim_map(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_range(self):
        rng = np.random.default_rng(2)
        vals = ssim_map(rng.random((16, 16)), rng.random((16, 16)))
        assert vals.min() >= -1.0 - 1e-12 and vals.max() <= 1.0 + 1e-12


class TestReconstructionLoss:
    def test_perfect_reconstruction_zero(self):
        rng = np.random.default_rng(3)
        img = rng.random((6, 6, 3))
        v = rng.random((6, 6))
        loss, degenerate = reconstruction_loss(img, img.copy(), v)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert not degenerate

    def test_single_pixel_hand_arithmetic(self):
        # V=1, gamma=0.8, |r|=0.5, SSIM=0.9 -> 0.2*0.5 + 0.8*0.1 = 0.18
        target = np.array([[0.75]])
        recon = np.array([[0.25]])
        loss, _ = reconstruction_loss(target, recon, np.ones((1, 1)),
                                      gamma=0.8, ssim_vals=np.array([[0.9]]))
        assert loss == pytest.approx(0.18)

    def test_zero_weight_mass_flags_degenerate(self):
        loss, degenerate = reconstruction_loss(np.ones((2, 2)), np.zeros((2, 2)),
                                               np.zeros((2, 2)))
        assert loss == 0.0
        assert degenerate


class TestGeometricLoss:
    def test_zero_diff(self):
        assert geometric_loss(np.ones((2, 2)), np.zeros((2, 2))) == 0.0

    def test_mean_of_two_pixels(self):
        m = np.array([[1.0, 1.0]])
        d = np.array([[0.2, 0.4]])
        assert geometric_loss(m, d) == pytest.approx(0.3)

    def test_masking_changes_mean(self):
        m = np.array([[1.0, 0.0]])
        d = np.array([[0.2, 0.4]])
        assert geometric_loss(m, d) == pytest.approx(0.2)


class TestSmoothnessLoss:
    def test_constant_depth_zero(self):
        assert smoothness_loss(np.full((4, 4), 3.0), np.zeros((4, 4, 3))) == 0.0

    def test_single_step_contribution(self):
        # One interior depth step of 1 on a flat image: that x-difference
        # contributes 1^2 = 1 before averaging over all difference terms.
        d = np.array([[0.0, 1.0]])
        img = np.zeros((1, 2, 3))
        # one x-term (value 1), zero y-terms
        assert smoothness_loss(d, img) == pytest.approx(1.0)

    def test_image_edge_suppresses_penalty(self):
        d = np.array([[0.0, 1.0]])
        flat = np.zeros((1, 2, 3))
        edgy = np.zeros((1, 2, 3)); edgy[0, 1] = 50.0
        assert smoothness_loss(d, edgy) < 1e-8 * smoothness_loss(d, flat)


class TestTranslationPrior:
    def K(self):
        return Intrinsics(fx=10, fy=10, cx=1.0, cy=1.0, width=3, height=3)

    def cloud(self, z):
        return backproject(np.full((3, 3), z), self.K())

    def test_single_point_masks(self):
        fw = self.cloud(2.0)
        tgt = self.cloud(5.0)
        m = np.zeros((3, 3)); m[1, 1] = 1  # principal pixel: (0, 0, z)
        tp = translation_prior(fw, tgt, m, m)
        np.testing.assert_allclose(tp, [0.0, 0.0, 3.0])

    def test_static_object_zero_prior(self):
        fw = self.cloud(4.0)
        tgt = self.cloud(4.0)
        m = np.ones((3, 3))
        np.testing.assert_allclose(translation_prior(fw, tgt, m, m), 0.0, atol=1e-12)

    def test_empty_mask_returns_none(self):
        fw = self.cloud(4.0)
        tgt = self.cloud(4.0)
        assert translation_prior(fw, tgt, np.zeros((3, 3)), np.ones((3, 3))) is None


class TestTranslationLoss:
    def test_zero_when_equal(self):
        assert translation_loss([(1.0, 2.0, 3.0)], [(1.0, 2.0, 3.0)]) == 0.0

    def test_l1_hand_value(self):
        assert translation_loss([(1.0, 0.0, 0.0)], [(0.0, 0.0, 0.0)]) == pytest.approx(1.0)

    def test_mean_over_instances(self):
        pred = [(1.0, 0.0, 0.0), (0.0, 3.0, 0.0)]
        priors = [(0.0, 0.0, 0.0), (0.0, 0.0, 0.0)]
        assert translation_loss(pred, priors) == pytest.approx(2.0)

    def test_missing_prior_skipped(self):
        assert translation_loss([(1.0, 0.0, 0.0)], [None]) == 0.0


class TestHeightLoss:
    def test_exact_prior_zero(self):
        # depth == fy * p_h / h everywhere on the instance
        h, w = 8, 8
        m = np.zeros((h, w)); m[2:6, 3:5] = 1  # pixel height 4
        masks = InstanceMaskSet({1: m})
        fy = 10.0
        prior = HeightPrior(values={0: 2.0})
        expected_depth = fy * 2.0 / 4
        depth = np.full((h, w), expected_depth)
        assert height_loss(depth, masks, prior, fy) == pytest.approx(0.0)

    def test_single_pixel_hand_value(self):
        # 1-px instance, depth 10, mean depth 10, fy*p_h/h = 8 -> (1/10)*2 = 0.2
        m = np.zeros((1, 2)); m[0, 0] = 1
        masks = InstanceMaskSet({1: m})
        depth = np.full((1, 2), 10.0)
        prior = HeightPrior(values={0: 0.8})  # fy=10, h=1 -> 8
        assert height_loss(depth, masks, prior, fy=10.0) == pytest.approx(0.2)

    def test_mask_pixel_height(self):
        m = np.zeros((5, 5)); m[1, 2] = 1; m[3, 2] = 1
        assert mask_pixel_height(m) == 3
        assert mask_pixel_height(np.zeros((2, 2))) == 0

    def test_prior_clamped(self):
        p = HeightPrior(values={0: 99.0})
        assert p.get(0) == 5.0


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss((0, 0, 0, 0, 0)) == 0.0

    def test_default_weights_hand_sum(self):
        # 1.0 + 0.5 + 0.05 + 0.1 + 0.001 with unit components
        assert total_loss((1, 1, 1, 1, 1)) == pytest.approx(1.651)

    def test_zeroed_geometric_weight(self):
        cfg = LossConfig(weight_geo=0.0)
        assert total_loss((1, 1, 0, 0, 0), cfg) == pytest.approx(1.0)

    def test_breakdown_total_consistent(self):
        cfg = LossConfig()
        bd = make_breakdown(0.2, 0.1, 0.05, 0.0, 0.01, cfg)
        expected = 1.0 * 0.2 + 0.5 * 0.1 + 0.05 * 0.05 + 0.1 * 0.0 + 0.001 * 0.01
        assert bd.total == pytest.approx(expected, abs=1e-12)

    def test_record_keys(self):
        bd = LossBreakdown()
        assert set(bd.to_record()) == {"l_r", "l_g", "l_s", "l_t", "l_h",
                                       "total", "n_valid_px", "n_instances"}
