"""Quality and rate measurement: PSNR, multi-scale SSIM (raw and dB),
bits per pixel, and latent quantization error.

All image metrics take float64 arrays scaled to [0, 1], shaped (H, W) or
(C, H, W); channels are measured independently and averaged.  Windowed
statistics use an 11x11 Gaussian (sigma 1.5) computed by separable
convolution in 'valid' mode.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "PSNR_CAP", "MSSSIM_WEIGHTS", "RDPoint", "gaussian_window", "psnr",
    "ssim_scale_stats", "ms_ssim", "max_feasible_scales", "msssim_db", "bpp",
    "quantization_error", "downsample2x",
]

PSNR_CAP = 100.0
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
# Standard five-scale weights; renormalized when fewer scales are used.
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_C1 = 0.01 ** 2  # (K1 * dynamic range)^2 on the [0,1] scale
_C2 = 0.03 ** 2


class RDPoint:
    """One rate-distortion measurement row."""

    __slots__ = ("image", "q", "model", "bpp", "bpp_total", "psnr",
                 "msssim", "msssim_db", "eps_q")

    def __init__(self, image: str, q: int, model: str, bpp: float,
                 bpp_total: float, psnr: float, msssim: float,
                 msssim_db: float, eps_q: float):
        if bpp < 0 or eps_q < 0:
            raise ValueError("bpp and eps_q must be nonnegative")
        self.image, self.q, self.model = image, q, model
        self.bpp, self.bpp_total = bpp, bpp_total
        self.psnr, self.msssim, self.msssim_db = psnr, msssim, msssim_db
        self.eps_q = eps_q

    def row(self) -> list:
        return [self.image, self.q, self.model, self.bpp, self.bpp_total,
                self.psnr, self.msssim, self.msssim_db, self.eps_q]


def _check_pair(x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")


def psnr(x, xhat) -> float:
    """10*log10(1/MSE) on the [0,1] scale, capped at PSNR_CAP dB."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    _check_pair(x, xhat)
    mse = float(np.mean((x - xhat) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum 1."""
    half = (size - 1) / 2.0
    t = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _sepconv_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 2-D 'valid' convolution of one (H, W) plane."""
    rows = np.apply_along_axis(np.convolve, 1, img, taps, mode="valid")
    return np.apply_along_axis(np.convolve, 0, rows, taps, mode="valid")


def _as_planes(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ValueError(f"expected (H,W) or (C,H,W) image, got shape {x.shape}")


def ssim_scale_stats(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term at one scale.

    The contrast-structure mean is clamped at 0 so the weighted geometric
    combination stays defined for anticorrelated inputs.
    """
    taps = gaussian_window()
    l_vals, cs_vals = [], []
    for xp, yp in zip(_as_planes(x), _as_planes(y)):
        mx, my = _sepconv_valid(xp, taps), _sepconv_valid(yp, taps)
        sxx = _sepconv_valid(xp * xp, taps) - mx * mx
        syy = _sepconv_valid(yp * yp, taps) - my * my
        sxy = _sepconv_valid(xp * yp, taps) - mx * my
        l_vals.append(((2 * mx * my + _C1) / (mx * mx + my * my + _C1)).mean())
        cs_vals.append(((2 * sxy + _C2) / (sxx + syy + _C2)).mean())
    return float(np.mean(l_vals)), max(float(np.mean(cs_vals)), 0.0)


def downsample2x(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; trailing odd row/column is dropped."""
    planes = _as_planes(x)
    c, h, w = planes.shape
    planes = planes[:, :h - h % 2, :w - w % 2]
    pooled = planes.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return pooled if x.ndim == 3 else pooled[0]


def max_feasible_scales(height: int, width: int, cap: int = 5) -> int:
    """Largest scale count keeping both dims >= window size at the coarsest."""
    n = 0
    while n < cap and min(height, width) >= WINDOW_SIZE:
        n += 1
        height, width = height // 2, width // 2
    return n


def ms_ssim(x, xhat, scales: int | None = None) -> float:
    """Multi-scale SSIM in (0, 1]; 1.0 iff the inputs are identical.

    Contrast-structure terms enter at every scale, luminance only at the
    coarsest; weights are the standard five renormalized to the scale
    count used.  ``scales=None`` selects the largest feasible count.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    _check_pair(x, xhat)
    h, w = x.shape[-2], x.shape[-1]
    feasible = max_feasible_scales(h, w)
    if feasible == 0:
        raise ValueError(f"image {h}x{w} smaller than the {WINDOW_SIZE}-tap "
                         f"window; no scale is feasible")
    if scales is None:
        scales = feasible
    elif not 1 <= scales <= feasible:
        raise ValueError(f"requested {scales} scales; max feasible for "
                         f"{h}x{w} is {feasible}")
    weights = MSSSIM_WEIGHTS[:scales] / MSSSIM_WEIGHTS[:scales].sum()
    score = 1.0
    for j in range(scales):
        l_mean, cs_mean = ssim_scale_stats(x, xhat)
        if j == scales - 1:
            score *= (max(l_mean, 0.0) * cs_mean) ** weights[j]
        else:
            score *= cs_mean ** weights[j]
            x, xhat = downsample2x(x), downsample2x(xhat)
    return float(score)


def msssim_db(raw: float) -> float:
    """-10*log10(1 - raw); monotone in raw, +inf at exactly 1."""
    if not 0.0 <= raw <= 1.0:
        raise ValueError(f"MS-SSIM value {raw} outside [0, 1]")
    if raw == 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - raw)


def bpp(payload_bytes: int, width: int, height: int) -> float:
    """Bits per pixel of a coded payload (container header excluded)."""
    if width <= 0 or height <= 0:
        raise ValueError(f"zero-area image {width}x{height}")
    if payload_bytes < 0:
        raise ValueError("negative payload size")
    return 8.0 * payload_bytes / (width * height)


def quantization_error(y, z) -> float:
    """Euclidean distance ||z - y||_2 over all latent entries.

    Identical formula to the L2 feature distance used in training; the two
    agree exactly (shared definition, enforced by test).
    """
    y, z = np.asarray(y, dtype=np.float64), np.asarray(z, dtype=np.float64)
    _check_pair(y, z)
    d = z - y
    return float(np.sqrt((d * d).sum()))
