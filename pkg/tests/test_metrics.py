"""Loss values, metric oracles, and the error-reduction table arithmetic.

The SSIM/PSNR oracle here is a deliberately independent second
implementation: dense sliding windows with an explicit 2-D kernel,
instead of the library's separable filtering.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3snet import tensor as T
from m3snet.metrics import (LOSS_EPS, MetricReport, dssim_from_ssim,
                            error_reduction, psnr_loss, psnr_metric,
                            rmse_from_psnr, ssim_metric, to_luma)
from m3snet.tensor import DimensionError, Tensor


# ---------------------------------------------------------------------------
# clean-room oracle


def oracle_psnr(pred, target, mode="rgb"):
    p = np.rint(np.clip(np.asarray(pred, np.float64), 0, 1) * 255)
    t = np.rint(np.clip(np.asarray(target, np.float64), 0, 1) * 255)
    if mode == "y_channel":
        p = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        t = 0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2]
    mse = np.mean((p - t) ** 2)
    return 10.0 * np.log10(255.0 ** 2 / max(mse, 1e-8))


def _oracle_windows(img, k=11):
    h, w = img.shape
    s0, s1 = img.strides
    return np.lib.stride_tricks.as_strided(
        img, shape=(h - k + 1, w - k + 1, k, k), strides=(s0, s1, s0, s1))


def oracle_ssim_plane(p, t):
    k = 11
    ax = np.arange(k) - 5
    g1 = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
    kern = np.outer(g1, g1)
    kern /= kern.sum()
    wp = _oracle_windows(p, k)
    wt = _oracle_windows(t, k)
    mu_p = np.einsum("ijkl,kl->ij", wp, kern)
    mu_t = np.einsum("ijkl,kl->ij", wt, kern)
    ex_pp = np.einsum("ijkl,kl->ij", wp * wp, kern)
    ex_tt = np.einsum("ijkl,kl->ij", wt * wt, kern)
    ex_pt = np.einsum("ijkl,kl->ij", wp * wt, kern)
    var_p, var_t = ex_pp - mu_p ** 2, ex_tt - mu_t ** 2
    cov = ex_pt - mu_p * mu_t
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    score = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)
             / ((mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)))
    return score.mean()


def oracle_ssim(pred, target, mode="rgb"):
    p = np.rint(np.clip(np.asarray(pred, np.float64), 0, 1) * 255)
    t = np.rint(np.clip(np.asarray(target, np.float64), 0, 1) * 255)
    if mode == "y_channel":
        return oracle_ssim_plane(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2],
                                 0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2])
    return np.mean([oracle_ssim_plane(p[c], t[c]) for c in range(p.shape[0])])


# ---------------------------------------------------------------------------


class TestPsnrLoss:
    def test_known_mse_values(self):
        pred = Tensor(np.full((1, 1, 10, 10), 0.1, dtype=np.float64))
        target = Tensor(np.zeros((1, 1, 10, 10), dtype=np.float64))
        loss = psnr_loss(pred, target)  # mse = 0.01
        assert float(loss.data) == pytest.approx(-20.0, abs=1e-5)

    def test_identical_inputs_hit_epsilon_floor(self, rng):
        x = rng.random((2, 3, 8, 8))
        loss = psnr_loss(Tensor(x), Tensor(x.copy()))
        assert float(loss.data) == pytest.approx(10 * np.log10(LOSS_EPS), abs=1e-6)
        assert float(loss.data) == pytest.approx(-80.0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))

    def test_loss_decreases_as_prediction_approaches_target(self, rng):
        target = rng.random((1, 3, 8, 8))
        noise = rng.standard_normal(target.shape)
        losses = [float(psnr_loss(Tensor(target + s * noise), Tensor(target)).data)
                  for s in (0.3, 0.1, 0.03)]
        assert losses[0] > losses[1] > losses[2]


class TestMetricOracles:
    def test_identical_images(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        assert ssim_metric(img, img) == pytest.approx(1.0, abs=1e-12)
        assert psnr_metric(img, img) == pytest.approx(10 * np.log10(255 ** 2 / 1e-8))

    def test_off_by_one_8bit(self):
        target = np.full((3, 24, 24), 100 / 255.0)
        pred = np.full((3, 24, 24), 101 / 255.0)
        # integer MSE of exactly 1 -> 20*log10(255)
        assert psnr_metric(pred, target) == pytest.approx(20 * np.log10(255), abs=1e-9)

    def test_agrees_with_cleanroom_oracle(self, rng):
        for trial in range(20):
            base = rng.random((3, 24, 20))
            noisy = np.clip(base + rng.normal(0, rng.uniform(0.01, 0.3), base.shape), 0, 1)
            for mode in ("rgb", "y_channel"):
                assert psnr_metric(noisy, base, mode) == pytest.approx(
                    oracle_psnr(noisy, base, mode), abs=1e-6)
                assert ssim_metric(noisy, base, mode) == pytest.approx(
                    oracle_ssim(noisy, base, mode), abs=1e-6)

    def test_psnr_monotone_in_perturbation(self, rng):
        base = rng.random((3, 16, 16))
        noise = rng.standard_normal(base.shape)
        scores = [psnr_metric(np.clip(base + s * noise, 0, 1), base)
                  for s in (0.02, 0.08, 0.3)]
        assert scores[0] > scores[1] > scores[2]

    def test_ssim_symmetric(self, rng):
        a, b = rng.random((3, 20, 20)), rng.random((3, 20, 20))
        assert ssim_metric(a, b) == pytest.approx(ssim_metric(b, a), abs=1e-12)

    def test_ssim_shift_invariant_away_from_saturation(self, rng):
        a = 0.3 + 0.2 * rng.random((3, 20, 20))
        b = 0.3 + 0.2 * rng.random((3, 20, 20))
        # adding the same constant leaves (quantized) structure unchanged
        assert ssim_metric(a + 40 / 255, b + 40 / 255) == pytest.approx(
            ssim_metric(a, b), abs=5e-3)

    def test_luma_equals_rgb_for_grayscale(self, rng):
        gray = rng.random((1, 20, 20))
        img_a = np.repeat(gray, 3, axis=0)
        gray_b = np.clip(gray + rng.normal(0, 0.1, gray.shape), 0, 1)
        img_b = np.repeat(gray_b, 3, axis=0)
        assert psnr_metric(img_a, img_b, "y_channel") == pytest.approx(
            psnr_metric(img_a, img_b, "rgb"), abs=1e-9)

    def test_luma_weights_sum_to_one(self):
        ones = np.ones((3, 4, 4))
        np.testing.assert_allclose(to_luma(ones), 1.0, atol=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            psnr_metric(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestTableArithmetic:
    def test_conversions(self):
        assert rmse_from_psnr(20.0) == pytest.approx(0.1)
        assert dssim_from_ssim(0.9) == pytest.approx(0.05)

    def test_psnr_reduction_anchors(self):
        # benchmark-table anchors reproducible from printed averages
        frac, ok = error_reduction(33.84, 33.75, "psnr")
        assert ok and frac * 100 == pytest.approx(1.0, abs=0.05)
        frac, ok = error_reduction(33.84, 31.81, "psnr")
        assert ok and frac * 100 == pytest.approx(20.8, abs=0.1)
        frac, ok = error_reduction(32.62, 31.81, "psnr")
        assert ok and frac * 100 == pytest.approx(8.9, abs=0.05)

    def test_ssim_reduction_anchor(self):
        frac, ok = error_reduction(0.926, 0.925, "ssim")
        assert ok and frac * 100 == pytest.approx(1.3, abs=0.1)

    def test_reduction_properties(self):
        frac, ok = error_reduction(30.0, 30.0, "psnr")
        assert ok and frac == 0.0
        plus, _ = error_reduction(31.0, 30.0, "psnr")
        minus, _ = error_reduction(30.0, 31.0, "psnr")
        assert plus > 0 > minus
        zero, defined = error_reduction(0.9, 1.0, "ssim")
        assert zero == 0.0 and not defined

    @settings(max_examples=30, deadline=None)
    @given(st.floats(10, 50), st.floats(10, 50))
    def test_reduction_sign_tracks_gap(self, best, other):
        frac, ok = error_reduction(best, other, "psnr")
        assert ok
        assert (frac > 0) == (best > other) or frac == 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            error_reduction(1.0, 2.0, "mse")


class TestReport:
    def test_text_and_csv(self):
        rep = MetricReport(channel_mode="rgb")
        rep.add("a", 30.0, 0.9)
        rep.add("b", 32.0, 0.95)
        assert rep.mean_psnr == pytest.approx(31.0)
        assert rep.mean_ssim == pytest.approx(0.925)
        text = rep.to_text()
        assert "a: psnr=30.0000" in text and "mean: psnr=31.0000" in text
        csv = rep.to_csv().splitlines()
        assert csv[0] == "image,psnr,ssim"
        assert csv[1].startswith("a,30.")
        assert csv[-1].startswith("mean,31.")
