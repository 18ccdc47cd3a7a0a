import numpy as np
import pytest
from skimage.metrics import structural_similarity

from splat4d.confidence import ConfidenceMaps
from splat4d.errors import InvalidParameterError
from splat4d.losses import (
    DebugPullGuidance,
    LossWeights,
    NullGuidance,
    apply_guidance,
    get_guidance,
    loss_img_conf,
)

C1, C2 = 0.01**2, 0.03**2


def unweighted_loss(a, b, lam_rgb=8000.0, lam_ssim=2000.0):
    _, full = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, data_range=1.0,
                                    use_sample_covariance=False, channel_axis=-1, full=True)
    return lam_rgb * np.mean(np.abs(a - b)) + lam_ssim * (1 - full.mean())


class TestLoss:
    def test_identical_images(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        loss = loss_img_conf(a, a, ConfidenceMaps.ones((16, 16)), LossWeights())
        assert loss.total == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(loss.grad, 0.0, atol=1e-9)

    def test_zero_confidence(self, rng):
        a, b = rng.uniform(size=(2, 12, 12, 3))
        loss = loss_img_conf(a, b, ConfidenceMaps(np.zeros((12, 12)), np.zeros((12, 12))),
                             LossWeights())
        assert loss.total == 0.0
        assert not np.any(loss.grad)

    def test_constant_8x8_example(self):
        a, b = np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.4)
        loss = loss_img_conf(a, b, ConfidenceMaps.ones((8, 8)), LossWeights())
        s = (2 * 0.5 * 0.4 + C1) * C2 / ((0.5**2 + 0.4**2 + C1) * C2)
        assert loss.rgb_term == pytest.approx(800.0, rel=1e-12)
        assert loss.ssim_term == pytest.approx(2000 * (1 - s), rel=1e-9)
        assert loss.ssim_term == pytest.approx(48.76859302609119, rel=1e-9)
        assert loss.total == pytest.approx(848.76859302609119, rel=1e-12)

    def test_reduces_to_unweighted_form(self, rng):
        for _ in range(20):
            a, b = rng.uniform(size=(2, 16, 16, 3))
            loss = loss_img_conf(a, b, ConfidenceMaps.ones((16, 16)), LossWeights())
            assert abs(loss.total - unweighted_loss(a, b)) <= 1e-12 * abs(loss.total)
            assert loss.total == pytest.approx(loss.rgb_term + loss.ssim_term, rel=1e-15)

    def test_gradient_matches_finite_differences(self, rng):
        a, b = rng.uniform(size=(2, 14, 12, 3))
        maps = ConfidenceMaps(rng.uniform(size=(14, 12)), rng.uniform(size=(14, 12)))
        w = LossWeights()
        grad = loss_img_conf(a, b, maps, w).grad
        h = 1e-6
        for _ in range(20):
            idx = tuple(int(rng.integers(s)) for s in a.shape)
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            fd = (loss_img_conf(ap, b, maps, w).total - loss_img_conf(am, b, maps, w).total) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-4)

    def test_confidence_scales_terms(self, rng):
        a, b = rng.uniform(size=(2, 12, 12, 3))
        ones = loss_img_conf(a, b, ConfidenceMaps.ones((12, 12)), LossWeights())
        half = loss_img_conf(a, b, ConfidenceMaps(np.full((12, 12), 0.5), np.full((12, 12), 0.25)),
                             LossWeights())
        assert half.rgb_term == pytest.approx(0.5 * ones.rgb_term, rel=1e-14)
        assert half.ssim_term == pytest.approx(0.25 * ones.ssim_term, rel=1e-14)

    def test_shape_errors(self, rng):
        with pytest.raises(InvalidParameterError):
            loss_img_conf(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), ConfidenceMaps.ones((8, 8)),
                          LossWeights())
        with pytest.raises(InvalidParameterError):
            loss_img_conf(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), ConfidenceMaps.ones((4, 4)),
                          LossWeights())

    def test_negative_weight(self):
        with pytest.raises(InvalidParameterError):
            LossWeights(lambda_rgb_base=-1)


class TestGuidance:
    def test_null(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        assert not np.any(apply_guidance(NullGuidance(), img, None, 1.0))

    def test_debug_pull_zero(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        assert not np.any(apply_guidance(DebugPullGuidance(), img, img, 1.0))

    @pytest.mark.parametrize("lam", [1.0, 0.3])
    def test_debug_pull_constant(self, rng, lam):
        cond = rng.uniform(size=(4, 4, 3))
        np.testing.assert_allclose(apply_guidance(DebugPullGuidance(), cond + 0.2, cond, lam),
                                   0.2 * lam, atol=1e-15)

    def test_missing_condition(self):
        with pytest.raises(InvalidParameterError):
            apply_guidance(DebugPullGuidance(), np.zeros((2, 2, 3)), None)

    def test_registry(self):
        assert isinstance(get_guidance("null"), NullGuidance)
        with pytest.raises(InvalidParameterError):
            get_guidance("sds")

    def test_shape_checked(self):
        class Bad:
            name, requires_condition = "bad", False

            def __call__(self, render, condition=None):
                return np.zeros(3), 1.0

        with pytest.raises(InvalidParameterError):
            apply_guidance(Bad(), np.zeros((2, 2, 3)))
