"""Per-channel factorized entropy model over integer latent symbols.

Each latent channel c carries a logistic distribution with learned location
mu_c and log-scale s_c; the CDF is F_c(v) = sigmoid((v - mu_c)/exp(s_c)).
Symbol mass is the CDF difference across the unit cell, pmf(k) =
F_c(k+0.5) - F_c(k-0.5), which telescopes to 1 over all integers.  The same
difference evaluated at continuous points gives the differentiable rate
surrogate used in training.  For actual coding, per-channel integer CDF
tables quantize the mass to 16-bit precision with a dedicated escape slot
for out-of-range symbols.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import ShapeError, Tensor

__all__ = ["FactorizedEntropyModel", "quantize_pmf", "TABLE_TOTAL", "RATE_FLOOR"]

TABLE_TOTAL = 1 << 16      # quantized CDF tables sum to this
RATE_FLOOR = 2.0 ** -50    # minimum mass inside -log2 (avoids infinities)
MIN_SCALE = 1e-9


def _logistic_cdf(v, mu, scale):
    return 1.0 / (1.0 + np.exp(-(np.asarray(v, dtype=np.float64) - mu) / scale))


def quantize_pmf(probs) -> np.ndarray:
    """Quantize a probability vector to an integer CDF summing to TABLE_TOTAL.

    Every slot receives count >= 1 (so every symbol stays codable); rounding
    drift is repaired on the largest slots.  Returns the cumulative array:
    cdf[0] = 0, cdf[-1] = TABLE_TOTAL, strictly increasing.  Deterministic.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 1:
        raise ValueError("quantize_pmf needs a nonempty 1-D probability vector")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("probabilities must be finite and nonnegative")
    if probs.size > TABLE_TOTAL:
        raise ValueError(f"more slots ({probs.size}) than table capacity")
    counts = np.maximum(1, np.rint(probs * TABLE_TOTAL).astype(np.int64))
    drift = TABLE_TOTAL - int(counts.sum())
    order = np.argsort(counts, kind="stable")[::-1]  # repair on largest slots
    for i in order:
        take = drift if drift > 0 else max(drift, 1 - int(counts[i]))
        counts[i] += take
        drift -= take
        if drift == 0:
            break
    if drift != 0:
        raise ValueError(f"cannot normalize CDF table "
                         f"({probs.size} slots, residual drift {drift})")
    cdf = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=cdf[1:])
    return cdf


class FactorizedEntropyModel(Module):
    """Learned (mu, log-scale) logistic mass per latent channel."""

    def __init__(self, channels: int, name: str = "entropy",
                 tail_mass: float = 1e-6):
        super().__init__()
        if channels < 1:
            raise ShapeError(f"entropy model needs >= 1 channel, got {channels}")
        self.channels = channels
        self.tail_mass = tail_mass
        self.mu = self._param(np.zeros(channels), f"{name}.mu")
        self.log_scale = self._param(np.zeros(channels), f"{name}.log_scale")

    # -- float-side evaluation (tables, pmf queries) ------------------------

    def location_scale(self, channel: int) -> tuple[float, float]:
        if not 0 <= channel < self.channels:
            raise ShapeError(f"channel {channel} out of range [0, {self.channels})")
        return float(self.mu.data[channel]), float(math.exp(self.log_scale.data[channel]))

    def pmf(self, k, channel: int):
        """Mass of integer symbol(s) k under channel's logistic cell."""
        mu, scale = self.location_scale(channel)
        k = np.asarray(k, dtype=np.float64)
        out = _logistic_cdf(k + 0.5, mu, scale) - _logistic_cdf(k - 0.5, mu, scale)
        return float(out) if out.ndim == 0 else out

    def symbol_range(self, channel: int) -> tuple[int, int]:
        """Smallest integer interval leaving < tail_mass per side, widened to
        at least one step around the distribution center round(mu)."""
        mu, scale = self.location_scale(channel)
        q = scale * math.log((1.0 - self.tail_mass) / self.tail_mass)  # logit(1-tau)
        lo = math.floor(mu - q + 0.5)
        hi = math.ceil(mu + q - 0.5)
        center = int(np.copysign(np.floor(abs(mu) + 0.5), mu))
        return min(lo, center - 1), max(hi, center + 1)

    def quantized_cdf_table(self, channel: int) -> np.ndarray:
        """Integer CDF over [lo, hi] plus an escape slot.

        Returns a cumulative array of length (hi-lo+1) + 2: cdf[0] = 0,
        cdf[-1] = TABLE_TOTAL, strictly increasing (every symbol, escape
        included, gets count >= 1).  Deterministic in the parameters.
        """
        mu, scale = self.location_scale(channel)
        if scale < MIN_SCALE:
            raise ValueError(f"channel {channel} scale {scale:g} is degenerate "
                             f"(< {MIN_SCALE:g})")
        lo, hi = self.symbol_range(channel)
        ks = np.arange(lo, hi + 1, dtype=np.float64)
        p = self.pmf(ks, channel)
        escape = max(0.0, 1.0 - float(p.sum()))
        return quantize_pmf(np.append(p, escape))

    def table_pmf(self, table: np.ndarray) -> np.ndarray:
        """Per-slot mass implied by a quantized table (escape slot last)."""
        return np.diff(table).astype(np.float64) / TABLE_TOTAL

    # -- tensor-side evaluation (training) ----------------------------------

    def rate_bits(self, y_hat: Tensor) -> Tensor:
        """Total -log2 mass of a latent batch, differentiable.

        Accepts continuous values (noise-relaxed latents): the mass is the
        CDF difference at +-0.5 around each value.  Per-symbol mass is
        clamped below at RATE_FLOOR.
        """
        if y_hat.data.ndim != 4 or y_hat.shape[1] != self.channels:
            raise ShapeError(f"rate_bits expects (N,{self.channels},h,w), "
                             f"got {y_hat.shape}")
        mu = T.reshape(self.mu, (1, self.channels, 1, 1))
        inv_scale = T.exp(T.scalar_mul(T.reshape(self.log_scale,
                                                 (1, self.channels, 1, 1)), -1.0))
        centered = T.sub(y_hat, mu)
        half = Tensor(np.full((1, 1, 1, 1), 0.5))
        upper = T.sigmoid(T.mul(T.add(centered, half), inv_scale))
        lower = T.sigmoid(T.mul(T.sub(centered, half), inv_scale))
        mass = T.clamp_min(T.sub(upper, lower), RATE_FLOOR)
        return T.scalar_mul(T.summation(T.log(mass)), -1.0 / math.log(2.0))
