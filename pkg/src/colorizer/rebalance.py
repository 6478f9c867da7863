"""Color-class rebalancing: empirical prior, smoothing, and loss weights.

The empirical distribution of ab values in natural images is dominated by
desaturated colors; the training loss reweights each pixel by the inverse
(smoothed, uniform-mixed) frequency of its color bin so rare colors still
drive learning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .colorspace import LabImage, split_channels
from .quantize import GamutBins

DEFAULT_LAMBDA = 0.5
DEFAULT_SIGMA = 5.0


@dataclass
class PriorWeights:
    """Empirical prior, smoothed prior and rebalancing weights over Q bins.

    ``weights_lambda0`` (used by the class-balanced evaluation metric) is
    only defined when the smoothed prior is strictly positive everywhere.
    """

    prior: np.ndarray
    smoothed_prior: np.ndarray
    weights: np.ndarray
    lam: float
    sigma: float
    pixel_count: int
    weights_lambda0: Optional[np.ndarray] = None

    @property
    def q(self) -> int:
        return len(self.prior)

    def validate(self):
        for name, arr in (("prior", self.prior),
                          ("smoothed_prior", self.smoothed_prior),
                          ("weights", self.weights)):
            if arr.shape != (self.q,):
                raise ValueError(f"{name} must have length Q={self.q}")
        for name, p in (("prior", self.prior), ("smoothed_prior", self.smoothed_prior)):
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} is not on the simplex")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(float(self.smoothed_prior @ self.weights) - 1.0) > 1e-9:
            raise ValueError("E[w] under the smoothed prior must be 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.weights_lambda0 is not None:
            if self.weights_lambda0.shape != (self.q,):
                raise ValueError("weights_lambda0 must have length Q")
            if np.any(self.weights_lambda0 <= 0):
                raise ValueError("weights_lambda0 must be strictly positive")


def estimate_prior(dataset: Iterable[LabImage],
                   bins: GamutBins) -> tuple[np.ndarray, int]:
    """Empirical bin distribution over a dataset by hard nearest-bin counts.

    Returns (p, pixel_count). Counting is associative, so partial counts from
    parallel workers merge by addition.
    """
    counts = np.zeros(bins.q, dtype=np.int64)
    n_pixels = 0
    for img in dataset:
        _, Y = split_channels(img)
        idx = bins.nearest(Y)
        counts += np.bincount(idx.ravel(), minlength=bins.q)
        n_pixels += idx.size
    if n_pixels == 0:
        raise ValueError("empty dataset")
    return counts / float(n_pixels), n_pixels


def _gaussian_kernel(sigma: float, grid_step: float) -> np.ndarray:
    """Normalized 2-D Gaussian on the bin lattice, truncated at radius 4*sigma."""
    radius_cells = int(np.ceil(4.0 * sigma / grid_step))
    d = grid_step * np.arange(-radius_cells, radius_cells + 1)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def smooth_prior(p: np.ndarray, bins: GamutBins,
                 sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian-smooth a bin distribution (sigma in ab units).

    The prior is embedded on the full 2-D lattice with zeros at out-of-gamut
    cells, convolved with a truncated normalized Gaussian, restricted back to
    the in-gamut bins and renormalized to sum 1.
    """
    sigma = max(float(sigma), 1e-3)
    n = len(bins.lattice_values())
    cells = bins.lattice_cells()
    grid = np.zeros((n, n), dtype=np.float64)
    grid[cells[:, 0], cells[:, 1]] = p

    kernel = _gaussian_kernel(sigma, bins.grid_step)
    r = kernel.shape[0] // 2
    padded = np.pad(grid, r)
    out = np.zeros_like(grid)
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            out += kernel[i, j] * padded[i:i + n, j:j + n]

    restricted = out[cells[:, 0], cells[:, 1]]
    total = restricted.sum()
    if total <= 0:
        raise ValueError("smoothed prior lost all mass")
    return restricted / total


def compute_weights(p_tilde: np.ndarray, lam: float) -> np.ndarray:
    """Rebalancing weights: w proportional to ((1-lam) p~ + lam/Q)^-1,
    scaled so the expectation of w under p~ is exactly 1.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    q = len(p_tilde)
    if lam == 1.0:
        # uniform mixing only: weights degenerate to exactly 1
        return np.ones(q, dtype=np.float64)
    mixed = (1.0 - lam) * np.asarray(p_tilde, dtype=np.float64) + lam / q
    if np.any(mixed <= 0):
        raise ValueError(
            "smoothed prior has zero-probability bins; lambda=0 weights are "
            "undefined (smooth the prior or raise lambda)")
    raw = 1.0 / mixed
    return raw / float(np.asarray(p_tilde, dtype=np.float64) @ raw)


def pixel_weight(Z_pixel: np.ndarray, w: np.ndarray) -> float:
    """Eq.-style per-pixel weight: w at the modal bin of the encoded target."""
    return float(w[int(np.argmax(Z_pixel))])


def pixel_weights(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Vectorized ``pixel_weight`` over an (..., Q) array of targets."""
    return w[np.argmax(Z, axis=-1)]


def build_prior_weights(dataset: Iterable[LabImage], bins: GamutBins,
                        lam: float = DEFAULT_LAMBDA,
                        sigma: float = DEFAULT_SIGMA) -> PriorWeights:
    """Full pipeline: estimate, smooth, weight; also the lambda=0 weights
    for the class-balanced metric when the smoothed prior allows them."""
    p, n_pixels = estimate_prior(dataset, bins)
    p_tilde = smooth_prior(p, bins, sigma)
    weights = compute_weights(p_tilde, lam)
    w_l0 = compute_weights(p_tilde, 0.0) if np.all(p_tilde > 0) else None
    pw = PriorWeights(prior=p, smoothed_prior=p_tilde, weights=weights,
                      lam=float(lam), sigma=float(sigma), pixel_count=n_pixels,
                      weights_lambda0=w_l0)
    pw.validate()
    return pw
