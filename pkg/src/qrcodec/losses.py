"""Training objectives: feature distances between latents, distortion terms
(scaled MSE or 1 - MS-SSIM), and the two phase losses.

Units: rate enters in bits per pixel; MSE distortion is scaled by 255^2 so
conventional trade-off weights behave; feature distances aggregate over the
whole latent batch.  The soft-phase loss is rate + lambda*distortion +
alpha*feature_distance; the predictive-phase loss drops the rate term.
"""

from __future__ import annotations

import numpy as np

from . import metrics
from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "DISTANCE_KINDS", "DISTORTION_KINDS", "feature_distance", "distortion",
    "ms_ssim_tensor", "loss_soft", "loss_predictive",
]

DISTANCE_KINDS = ("l2", "l1", "smooth_l1", "cosine")
DISTORTION_KINDS = ("mse", "msssim")
_MSE_SCALE = 255.0 ** 2
_EPS = 1e-12


def feature_distance(y: Tensor, y_tilde: Tensor, kind: str = "l2") -> Tensor:
    """Distance between a latent batch and its prediction (scalar Tensor).

    l2 is the Euclidean norm over all entries (the quantization-error
    definition); l1 and smooth_l1 sum elementwise; cosine is
    1 - cosine similarity of the flattened latents.
    """
    if y.shape != y_tilde.shape:
        raise ShapeError(f"latent shapes differ: {y.shape} vs {y_tilde.shape}")
    diff = T.sub(y_tilde, y)
    if kind == "l2":
        return T.l2_norm(diff)
    if kind == "l1":
        return T.summation(T.absolute(diff))
    if kind == "smooth_l1":
        return T.summation(T.smooth_l1(diff))
    if kind == "cosine":
        dot = T.summation(T.mul(y, y_tilde))
        denom = T.clamp_min(T.mul(T.l2_norm(y), T.l2_norm(y_tilde)), _EPS)
        return T.sub(Tensor(np.asarray(1.0)), T.div(dot, denom))
    raise ValueError(f"unknown feature distance {kind!r}; "
                     f"expected one of {DISTANCE_KINDS}")


def _blockdiag_kernel(channels: int, tap2d: np.ndarray) -> Tensor:
    k = np.zeros((channels, channels, *tap2d.shape))
    for c in range(channels):
        k[c, c] = tap2d
    return Tensor(k)


def ms_ssim_tensor(x: Tensor, xhat: Tensor, scales: int | None = None) -> Tensor:
    """Differentiable multi-scale SSIM matching :func:`metrics.ms_ssim`.

    Windowed statistics come from channelwise (block-diagonal) convolutions
    with the shared 11x11 Gaussian; downsampling is 2x2 mean pooling.
    """
    if x.shape != xhat.shape or x.data.ndim != 4:
        raise ShapeError(f"need matching (N,C,H,W) images, got {x.shape} "
                         f"vs {xhat.shape}")
    n, c, h, w = x.shape
    feasible = metrics.max_feasible_scales(h, w)
    if feasible == 0:
        raise ValueError(f"image {h}x{w} smaller than the window; "
                         f"no scale is feasible")
    if scales is None:
        scales = feasible
    elif not 1 <= scales <= feasible:
        raise ValueError(f"requested {scales} scales; max feasible is {feasible}")
    taps = metrics.gaussian_window()
    window = _blockdiag_kernel(c, np.outer(taps, taps))
    pool = _blockdiag_kernel(c, np.full((2, 2), 0.25))
    weights = metrics.MSSSIM_WEIGHTS[:scales] / metrics.MSSSIM_WEIGHTS[:scales].sum()
    c1 = Tensor(np.asarray(metrics._C1))
    c2 = Tensor(np.asarray(metrics._C2))
    two = 2.0

    score = None
    for j in range(scales):
        mx = T.conv2d(x, window)
        my = T.conv2d(xhat, window)
        mxx, myy, mxy = T.square(mx), T.square(my), T.mul(mx, my)
        sxx = T.sub(T.conv2d(T.square(x), window), mxx)
        syy = T.sub(T.conv2d(T.square(xhat), window), myy)
        sxy = T.sub(T.conv2d(T.mul(x, xhat), window), mxy)
        cs_map = T.div(T.add(T.scalar_mul(sxy, two), c2),
                       T.add(T.add(sxx, syy), c2))
        cs = T.clamp_min(T.mean(cs_map), _EPS)
        if j == scales - 1:
            l_map = T.div(T.add(T.scalar_mul(mxy, two), c1),
                          T.add(T.add(mxx, myy), c1))
            lum = T.clamp_min(T.mean(l_map), _EPS)
            term = T.powf(T.mul(lum, cs), float(weights[j]))
        else:
            term = T.powf(cs, float(weights[j]))
            x, xhat = T.conv2d(x, pool, stride=2), T.conv2d(xhat, pool, stride=2)
        score = term if score is None else T.mul(score, term)
    return score


def distortion(x: Tensor, xhat: Tensor, kind: str = "mse") -> Tensor:
    """Reconstruction distortion term (scalar Tensor)."""
    if x.shape != xhat.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {xhat.shape}")
    if kind == "mse":
        return T.scalar_mul(T.mean(T.square(T.sub(x, xhat))), _MSE_SCALE)
    if kind == "msssim":
        return T.sub(Tensor(np.asarray(1.0)), ms_ssim_tensor(x, xhat))
    raise ValueError(f"unknown distortion {kind!r}; "
                     f"expected one of {DISTORTION_KINDS}")


def _pixels(x: Tensor) -> float:
    return float(x.shape[0] * x.shape[2] * x.shape[3])


def loss_soft(x: Tensor, xhat: Tensor, y_noisy: Tensor, y: Tensor,
              y_tilde: Tensor, entropy_model, lam: float, alpha: float,
              distortion_kind: str = "mse",
              distance_kind: str = "l2") -> tuple[Tensor, dict]:
    """Rate + lambda*distortion + alpha*feature_distance (all gradients flow).

    Returns the scalar loss and a float report of its parts.  alpha == 0
    keeps the feature term out of the graph entirely (logged only), so a
    zero-coefficient run is bit-identical to one with no rectifier at all.
    """
    rate = T.scalar_mul(entropy_model.rate_bits(y_noisy), 1.0 / _pixels(x))
    dist = distortion(x, xhat, distortion_kind)
    total = T.add(rate, T.scalar_mul(dist, lam))
    if alpha != 0.0:
        fdist = feature_distance(y, y_tilde, distance_kind)
        total = T.add(total, T.scalar_mul(fdist, alpha))
        fd_val = fdist.item()
    else:
        with T.no_grad():
            fd_val = feature_distance(y, y_tilde, distance_kind).item()
    parts = {"rate_bpp": rate.item(), "distortion": dist.item(),
             "feature_distance": fd_val, "loss": total.item()}
    return total, parts


def loss_predictive(x: Tensor, xhat: Tensor, y: Tensor, y_tilde: Tensor,
                    alpha: float, distortion_kind: str = "mse",
                    distance_kind: str = "l2") -> tuple[Tensor, dict]:
    """Distortion + alpha*feature_distance; the rate term is omitted.

    As in loss_soft, alpha == 0 keeps the feature term out of the graph.
    """
    dist = distortion(x, xhat, distortion_kind)
    if alpha != 0.0:
        fdist = feature_distance(y, y_tilde, distance_kind)
        total = T.add(dist, T.scalar_mul(fdist, alpha))
        fd_val = fdist.item()
    else:
        total = dist
        with T.no_grad():
            fd_val = feature_distance(y, y_tilde, distance_kind).item()
    parts = {"distortion": dist.item(), "feature_distance": fd_val,
             "loss": total.item()}
    return total, parts
