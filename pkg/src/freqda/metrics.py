"""Transferability measurement between source and target band features.

Three interchangeable domain-distance quantities (kernel MMD, covariance
distance, adversarial-loss value) plus the per-interval averaging used to
smooth out iteration-to-iteration fluctuation.

All functions are pure and operate on float64 numpy arrays; band features
coming out of the training graph must be detached before measurement, which
never backpropagates. Sums are accumulated with ``math.fsum`` so that the
symmetry and permutation invariances hold exactly, not just to rounding.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

log = logging.getLogger(__name__)

METRIC_KINDS = ("mmd", "coral", "adversarial")

PROB_CLAMP = 1e-7


def _as_2d(v, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a nonempty (n, d) array, got shape {arr.shape}")
    return arr


def median_bandwidth(x, y):
    """Median pairwise distance over the pooled set; falls back to 1.0 at zero."""
    pooled = np.concatenate([x, y], axis=0)
    if len(pooled) < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0.0 else 1.0


def mmd(x, y, bandwidth="median"):
    """Biased squared-MMD estimate with a Gaussian kernel, clamped at zero.

    k(a, b) = exp(-||a - b||^2 / (2 sigma^2)); the estimator keeps the diagonal
    terms (mean over all n_s^2 / n_t^2 / n_s*n_t pairs), which guarantees
    nonnegativity. ``bandwidth`` is either a positive float sigma or
    ``"median"`` for the median heuristic recomputed per call.
    """
    x = _as_2d(x, "x")
    y = _as_2d(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if bandwidth == "median":
        sigma = median_bandwidth(x, y)
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
    gamma = 1.0 / (2.0 * sigma**2)
    kxx = math.fsum(np.exp(-gamma * cdist(x, x, "sqeuclidean")).ravel()) / (len(x) * len(x))
    kyy = math.fsum(np.exp(-gamma * cdist(y, y, "sqeuclidean")).ravel()) / (len(y) * len(y))
    kxy = math.fsum(np.exp(-gamma * cdist(x, y, "sqeuclidean")).ravel()) / (len(x) * len(y))
    return max(kxx + kyy - 2.0 * kxy, 0.0)


def coral(x, y):
    """Squared Frobenius distance between sample covariances, scaled by 1/(4 d^2)."""
    x = _as_2d(x, "x")
    y = _as_2d(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("coral needs at least 2 samples per set (covariance undefined)")
    d = x.shape[1]
    cx = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    cy = np.cov(y, rowvar=False, ddof=1).reshape(d, d)
    return float(np.sum((cx - cy) ** 2)) / (4.0 * d * d)


def adv_metric(d_src, d_tgt):
    """Value of the adversarial alignment loss on discriminator outputs.

    -mean log(1 - D(source)) - mean log(D(target)). Outputs at exactly 0 or 1
    are clamped into [1e-7, 1 - 1e-7] and the clamp is logged.
    """
    d_src = np.asarray(d_src, dtype=np.float64).ravel()
    d_tgt = np.asarray(d_tgt, dtype=np.float64).ravel()
    if len(d_src) < 1 or len(d_tgt) < 1:
        raise ValueError("discriminator output sets must be nonempty")
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    if (d_src < lo).any() or (d_src > hi).any() or (d_tgt < lo).any() or (d_tgt > hi).any():
        log.warning("discriminator outputs clamped into [%.0e, 1 - %.0e]", lo, lo)
    d_src = np.clip(d_src, lo, hi)
    d_tgt = np.clip(d_tgt, lo, hi)
    a = -math.fsum(np.log1p(-d_src)) / len(d_src)
    b = -math.fsum(np.log(d_tgt)) / len(d_tgt)
    return a + b


def interval_average(epsilon_values):
    """Arithmetic mean of the metric values measured over one interval."""
    values = list(epsilon_values)
    if not values:
        raise ValueError("cannot average an empty interval")
    return math.fsum(values) / len(values)


@dataclass
class TransferabilityRecord:
    """Per-band accumulator of the metric stream over one measurement interval."""

    band_index: int
    interval_length: int
    epsilon_values: list = field(default_factory=list)

    def add(self, value):
        if self.complete:
            raise ValueError(f"interval for band {self.band_index} already holds "
                             f"{self.interval_length} values")
        self.epsilon_values.append(float(value))

    @property
    def complete(self):
        return len(self.epsilon_values) >= self.interval_length

    @property
    def epsilon_bar(self):
        return interval_average(self.epsilon_values)
