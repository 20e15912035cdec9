"""PSNR training loss, evaluation metrics, and error-reduction arithmetic.

Training optimizes the negative PSNR of the normalized float prediction
(peak 1.0, epsilon-guarded). Evaluation quantizes to 8-bit first and uses
peak 255, matching how restoration benchmarks report scores; the derain
protocol computes both metrics on the luma channel (BT.601 full-range
Y = 0.299R + 0.587G + 0.114B).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .tensor import DimensionError, Tensor

LOSS_EPS = 1e-8
CHANNEL_MODES = ("rgb", "y_channel")


def psnr_loss(pred, target):
    """Differentiable negative PSNR (peak 1): 10*log10(MSE + eps).

    Minimizing it maximizes PSNR; identical inputs bottom out at the
    epsilon floor 10*log10(eps) = -80.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"psnr_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    mse = T.tmean(T.mul(diff, diff))
    return T.scale(T.log(T.add_scalar(mse, LOSS_EPS)), 10.0 / np.log(10.0))


# ---------------------------------------------------------------------------
# evaluation metrics (plain numpy, no graph)


def quantize(img):
    """Clamp [0,1] floats and round to uint8 pixel values."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)


def to_luma(img_chw):
    """BT.601 full-range luma from a CHW (or HW) array in pixel units."""
    if img_chw.ndim == 2:
        return img_chw
    if img_chw.shape[0] == 1:
        return img_chw[0]
    r, g, b = img_chw[0], img_chw[1], img_chw[2]
    return 0.299 * r + 0.587 * g + 0.114 * b


def _select(pred, target, mode):
    if mode not in CHANNEL_MODES:
        raise ValueError(f"channel mode must be one of {CHANNEL_MODES}, got {mode!r}")
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {target.shape}")
    p, t = quantize(pred), quantize(target)
    if p.ndim == 2:
        p, t = p[None], t[None]
    if mode == "y_channel":
        return to_luma(p)[None], to_luma(t)[None]
    return p, t


def psnr_metric(pred, target, mode="rgb"):
    """PSNR in dB on 8-bit-quantized values, peak 255, epsilon-capped."""
    p, t = _select(pred, target, mode)
    mse = np.mean((p - t) ** 2)
    return float(10.0 * np.log10(255.0 ** 2 / max(mse, LOSS_EPS)))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_kernel():
    half = _SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img, kernel):
    # separable correlation, then crop to the fully-covered interior
    half = len(kernel) // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _ssim_single(p, t):
    kernel = _gaussian_kernel()
    c1 = (_SSIM_K1 * 255.0) ** 2
    c2 = (_SSIM_K2 * 255.0) ** 2
    mu_p = _filter_valid(p, kernel)
    mu_t = _filter_valid(t, kernel)
    var_p = _filter_valid(p * p, kernel) - mu_p * mu_p
    var_t = _filter_valid(t * t, kernel) - mu_t * mu_t
    cov = _filter_valid(p * t, kernel) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def ssim_metric(pred, target, mode="rgb"):
    """Single-scale SSIM, 11x11 Gaussian window sigma=1.5, on 8-bit values.

    For rgb mode the per-channel scores are averaged.
    """
    p, t = _select(pred, target, mode)
    if p.shape[-1] < _SSIM_WINDOW or p.shape[-2] < _SSIM_WINDOW:
        raise DimensionError(f"image {p.shape[-2:]} smaller than the {_SSIM_WINDOW}x"
                             f"{_SSIM_WINDOW} comparison window")
    return float(np.mean([_ssim_single(p[c], t[c]) for c in range(p.shape[0])]))


# ---------------------------------------------------------------------------
# table arithmetic


def rmse_from_psnr(psnr_db):
    """Relative RMSE implied by a PSNR value (unit peak)."""
    return float(10.0 ** (-psnr_db / 20.0))


def dssim_from_ssim(ssim):
    return float((1.0 - ssim) / 2.0)


def error_reduction(best, other, kind):
    """Fractional error reduction of the best score relative to another.

    kind='psnr' compares the implied RMSEs; kind='ssim' compares DSSIMs.
    Positive means ``best`` really is better. Returns (fraction, defined);
    the ssim variant is undefined when the reference DSSIM is zero, in
    which case 0.0 is reported with defined=False.
    """
    if kind == "psnr":
        return float(1.0 - 10.0 ** ((other - best) / 20.0)), True
    if kind == "ssim":
        d_best, d_other = dssim_from_ssim(best), dssim_from_ssim(other)
        if d_other == 0.0:
            return 0.0, False
        return float((d_other - d_best) / d_other), True
    raise ValueError(f"kind must be 'psnr' or 'ssim', got {kind!r}")


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricReport:
    channel_mode: str = "rgb"
    per_image: list = field(default_factory=list)  # (image id, psnr, ssim)

    def add(self, image_id, psnr, ssim):
        self.per_image.append((str(image_id), float(psnr), float(ssim)))

    @property
    def mean_psnr(self):
        return float(np.mean([p for _, p, _ in self.per_image])) if self.per_image else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean([s for _, _, s in self.per_image])) if self.per_image else float("nan")

    def to_text(self):
        lines = [f"channel_mode={self.channel_mode} images={len(self.per_image)}"]
        for name, p, s in self.per_image:
            lines.append(f"{name}: psnr={p:.4f} ssim={s:.6f}")
        lines.append(f"mean: psnr={self.mean_psnr:.4f} ssim={self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["image,psnr,ssim"]
        for name, p, s in self.per_image:
            rows.append(f"{name},{p:.6f},{s:.6f}")
        rows.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(rows) + "\n"
