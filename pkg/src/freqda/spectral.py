"""2D DCT decomposition of feature maps, scan trajectories, and sliding-window bands.

Feature maps are torch tensors of shape (batch, channels, H, W). All transforms
here are differentiable, so gradients flow through band extraction back into the
feature extractor. Grids are small (8x8 by default); the transform is done as two
separable matrix contractions.

Two normalization modes:

* ``"raw"``   -- plain cosine sums with no scale factors. The (0, 0) coefficient
  equals H*W times the spatial mean, i.e. keeping only that cell reproduces
  global average pooling up to a constant.
* ``"ortho"`` -- orthonormal scaling. Parseval holds and the inverse transform
  is the transpose; used for round-trip checks. ``idct2`` only accepts this mode.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import torch

RAW = "raw"
ORTHO = "ortho"
NORMALIZATIONS = (RAW, ORTHO)

TRAJECTORY_KINDS = ("left-to-right", "up-to-down", "zigzag")


@dataclass(frozen=True)
class FrequencyTensor:
    """Per-channel 2D DCT coefficients of a feature-map batch.

    ``coeffs[b, c, i, j]`` is the coefficient of the cosine basis with vertical
    frequency i and horizontal frequency j; (0, 0) is the DC cell.
    """

    coeffs: torch.Tensor
    normalization: str

    @property
    def grid_shape(self):
        return tuple(self.coeffs.shape[-2:])


@dataclass(frozen=True)
class Trajectory:
    """A fixed scan order over the H x W frequency grid."""

    kind: str
    h: int
    w: int
    order: tuple  # tuple of (i, j), a permutation of the grid

    def __len__(self):
        return len(self.order)


@dataclass(frozen=True)
class BandWindow:
    """m consecutive trajectory positions starting at index j."""

    trajectory: Trajectory
    m: int
    j: int

    def __post_init__(self):
        n = len(self.trajectory)
        if not 1 <= self.m <= n:
            raise ValueError(f"window size m={self.m} out of range for grid of {n} cells")
        if not 0 <= self.j <= n - self.m:
            raise ValueError(
                f"window start j={self.j} out of range; need 0 <= j <= {n - self.m} for m={self.m}"
            )

    @property
    def positions(self):
        return self.trajectory.order[self.j : self.j + self.m]


def num_bands(h, w, m):
    """Number of distinct sliding windows of size m on an h x w grid."""
    return h * w - m + 1


@lru_cache(maxsize=None)
def _basis_1d(n, normalization, dtype, device):
    k = torch.arange(n, dtype=dtype, device=device)
    # B[h, i] = cos(pi*i/n * (h + 1/2))
    basis = torch.cos(math.pi * k[None, :] * (k[:, None] + 0.5) / n)
    if normalization == ORTHO:
        scale = torch.full((n,), math.sqrt(2.0 / n), dtype=dtype, device=device)
        scale[0] = math.sqrt(1.0 / n)
        basis = basis * scale[None, :]
    return basis


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        idx = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise ValueError(f"non-finite value in {name} at index {tuple(idx)}")


def dct2(feature_map, normalization=RAW):
    """Decompose a (batch, C, H, W) feature map into its 2D DCT coefficient grid.

    Separable form: coeffs = B_H^T x B_W applied per channel, equivalent to the
    quadruple cosine sum over (h, w) for each output cell (i, j).
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    if feature_map.ndim != 4:
        raise ValueError(f"expected (batch, C, H, W) tensor, got shape {tuple(feature_map.shape)}")
    _check_finite(feature_map, "feature map")
    h, w = feature_map.shape[-2:]
    bh = _basis_1d(h, normalization, feature_map.dtype, feature_map.device)
    bw = _basis_1d(w, normalization, feature_map.dtype, feature_map.device)
    coeffs = torch.einsum("bchw,hi,wj->bcij", feature_map, bh, bw)
    return FrequencyTensor(coeffs=coeffs, normalization=normalization)


def idct2(freq):
    """Invert an orthonormal-mode frequency tensor back to the spatial map."""
    if freq.normalization != ORTHO:
        raise ValueError(
            f"idct2 only supports {ORTHO!r} normalization (inverse is the transpose); "
            f"got {freq.normalization!r}"
        )
    h, w = freq.grid_shape
    bh = _basis_1d(h, ORTHO, freq.coeffs.dtype, freq.coeffs.device)
    bw = _basis_1d(w, ORTHO, freq.coeffs.dtype, freq.coeffs.device)
    return torch.einsum("bcij,hi,wj->bchw", freq.coeffs, bh, bw)


def make_trajectory(kind, h, w):
    """Build a scan order over the h x w grid.

    left-to-right is row-major, up-to-down is column-major, and zigzag walks
    anti-diagonals alternating direction (JPEG convention: the diagonal with
    i+j even is traversed bottom-to-top).
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    if kind == "left-to-right":
        order = [(i, j) for i in range(h) for j in range(w)]
    elif kind == "up-to-down":
        order = [(i, j) for j in range(w) for i in range(h)]
    elif kind == "zigzag":
        order = []
        for s in range(h + w - 1):
            lo = max(0, s - w + 1)
            hi = min(s, h - 1)
            rows = range(hi, lo - 1, -1) if s % 2 == 0 else range(lo, hi + 1)
            order.extend((i, s - i) for i in rows)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    return Trajectory(kind=kind, h=h, w=w, order=tuple(order))


def extract_band(freq, window):
    """Gather the window's coefficients into per-sample vectors of length C*m.

    Layout is channel-major: all m coefficients of channel 0 first, then
    channel 1, and so on.
    """
    h, w = freq.grid_shape
    traj = window.trajectory
    if (traj.h, traj.w) != (h, w):
        raise ValueError(
            f"trajectory grid {traj.h}x{traj.w} does not match frequency grid {h}x{w}"
        )
    if window.j + window.m > h * w:
        raise ValueError(f"window [{window.j}, {window.j + window.m}) exceeds the {h * w}-cell grid")
    rows = torch.tensor([p[0] for p in window.positions], device=freq.coeffs.device)
    cols = torch.tensor([p[1] for p in window.positions], device=freq.coeffs.device)
    band = freq.coeffs[:, :, rows, cols]  # (batch, C, m)
    return band.reshape(band.shape[0], -1)
