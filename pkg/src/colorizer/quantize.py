"""Quantized ab output space: gamut bins, soft-encoding, annealed-mean decode.

The ab plane is cut into a square lattice (step 10 by default) and a bin is
kept when some lightness makes it reachable from sRGB. Ground-truth chroma is
soft-encoded over the nearest bins with a Gaussian kernel; predicted
distributions are decoded back to chroma with a temperature-sharpened mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colorspace import RgbImage, srgb_to_lab

# exact zeros in a distribution would poison log() in the annealed mean
PROB_FLOOR = 1e-40

_CHUNK = 16384


class GamutError(ValueError):
    """No lattice bin survived the gamut test (broken conversion)."""


@dataclass(frozen=True)
class GamutBins:
    """In-gamut ab bin centers. Immutable and shareable across threads.

    ``centers`` is (Q, 2) float64, unique, sorted lexicographically by (a, b),
    every row on the ``grid_step`` lattice within ``lattice_extent``.
    """

    grid_step: float
    lattice_extent: float
    centers: np.ndarray

    @property
    def q(self) -> int:
        return len(self.centers)

    def lattice_values(self) -> np.ndarray:
        """The 1-D lattice coordinates spanning [-extent, extent]."""
        n = int(round(2 * self.lattice_extent / self.grid_step)) + 1
        return -self.lattice_extent + self.grid_step * np.arange(n)

    def lattice_cells(self) -> np.ndarray:
        """(Q, 2) integer cell coordinates of each center on the full lattice."""
        return np.round(
            (self.centers + self.lattice_extent) / self.grid_step
        ).astype(np.int64)

    def nearest(self, ab: np.ndarray) -> np.ndarray:
        """Index of the Euclidean-nearest center for each ab pair.

        ``ab`` is (..., 2); returns int64 of shape ``ab.shape[:-1]``. Ties
        break to the smallest index.
        """
        ab = np.asarray(ab, dtype=np.float64)
        flat = ab.reshape(-1, 2)
        out = np.empty(len(flat), dtype=np.int64)
        for lo in range(0, len(flat), _CHUNK):
            chunk = flat[lo:lo + _CHUNK]
            d2 = ((chunk[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
            out[lo:lo + _CHUNK] = np.argmin(d2, axis=1)
        return out.reshape(ab.shape[:-1])


@dataclass
class ColorDistribution:
    """Per-pixel probabilities over the Q bins; ``probs`` is (H, W, Q)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be (H, W, Q), got {self.probs.shape}")
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")
        sums = self.probs.sum(axis=-1, dtype=np.float64)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise ValueError("per-pixel probabilities must sum to 1 (+-1e-5)")

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def q(self) -> int:
        return self.probs.shape[2]


def _occupied_cells(grid_step: float, n_cells_half: int) -> np.ndarray:
    """Boolean grid of lattice cells hit by the full 8-bit sRGB cube.

    Every 8-bit color is converted to Lab and its ab value snapped to the
    nearest lattice center; the returned grid is indexed by cell coordinate
    plus ``n_cells_half`` on each axis.
    """
    n = 2 * n_cells_half + 1
    occupied = np.zeros((n, n), dtype=bool)
    vals = np.arange(256, dtype=np.uint8)
    g, b = np.meshgrid(vals, vals, indexing="ij")
    for r in range(256):
        data = np.stack([np.full_like(g, r), g, b], axis=-1)
        lab = srgb_to_lab(RgbImage(data=data))
        ai = np.round(lab.a.astype(np.float64) / grid_step).astype(np.int64)
        bi = np.round(lab.b.astype(np.float64) / grid_step).astype(np.int64)
        keep = (np.abs(ai) <= n_cells_half) & (np.abs(bi) <= n_cells_half)
        occupied[ai[keep] + n_cells_half, bi[keep] + n_cells_half] = True
    return occupied


def build_gamut(grid_step: float = 10.0,
                lattice_extent: float = 110.0) -> GamutBins:
    """Enumerate the in-gamut ab lattice bin centers.

    A bin is in-gamut iff its cell, or an edge-adjacent cell, contains the
    ab value of at least one 8-bit sRGB color (cells assign ab values to the
    nearest lattice center). The adjacency ring guarantees that every bin the
    soft-encoder can put weight on for a realizable color exists in the
    output space. With the default step-10 lattice over [-110, 110] this
    keeps Q=321 bins.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    n_half = int(round(lattice_extent / grid_step))
    occupied = _occupied_cells(grid_step, n_half)
    if not occupied.any():
        raise GamutError("no bin passed the gamut test; conversion is broken")
    in_gamut = occupied.copy()
    in_gamut[1:, :] |= occupied[:-1, :]
    in_gamut[:-1, :] |= occupied[1:, :]
    in_gamut[:, 1:] |= occupied[:, :-1]
    in_gamut[:, :-1] |= occupied[:, 1:]
    ai, bi = np.nonzero(in_gamut)  # row major, so lexicographic by (a, b)
    centers = np.stack([ai - n_half, bi - n_half], axis=-1) * float(grid_step)
    return GamutBins(grid_step=float(grid_step),
                     lattice_extent=float(lattice_extent),
                     centers=centers)


def nearest_bin(ab, bins: GamutBins):
    """Nearest-center index for one ab pair or an array of them."""
    return bins.nearest(ab)


def encode_soft(Y: np.ndarray, bins: GamutBins, k: int = 5,
                sigma: float = 5.0) -> ColorDistribution:
    """Soft-encode chroma (H, W, 2) over the k nearest bins.

    Weights are a Gaussian in distance, exp(-d^2 / (2 sigma^2)), normalized
    to sum 1 per pixel; all other bins get exactly 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    h, w = Y.shape[:2]
    flat = Y.reshape(-1, 2)
    probs = np.zeros((len(flat), bins.q), dtype=np.float32)
    rows = np.arange(len(flat))
    for lo in range(0, len(flat), _CHUNK):
        chunk = flat[lo:lo + _CHUNK]
        d2 = ((chunk[:, None, :] - bins.centers[None, :, :]) ** 2).sum(axis=2)
        # stable sort so equidistant neighbors resolve to smaller indices
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        wts = np.exp(-np.take_along_axis(d2, idx, axis=1) / (2.0 * sigma ** 2))
        wts /= wts.sum(axis=1, keepdims=True)
        probs[rows[lo:lo + _CHUNK, None], idx] = wts.astype(np.float32)
    return ColorDistribution(probs=probs.reshape(h, w, bins.q))


def encode_onehot(Y: np.ndarray, bins: GamutBins) -> ColorDistribution:
    """1-hot encoding at the nearest bin; equals ``encode_soft`` with k=1."""
    return encode_soft(Y, bins, k=1)


def _sharpen(probs: np.ndarray, T: float) -> np.ndarray:
    """Temperature-adjusted softmax of a stored distribution, float64."""
    logits = np.log(np.maximum(probs.astype(np.float64), PROB_FLOOR)) / T
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def decode_annealed_mean(Zhat: ColorDistribution, bins: GamutBins,
                         T: float = 0.38) -> np.ndarray:
    """Decode a distribution to chroma (H, W, 2) via the annealed mean.

    Each pixel's distribution is sharpened by temperature T (T=1 leaves it
    unchanged, T->0 approaches the mode) and the expectation over bin
    centers is returned.
    """
    if not 0.0 < T <= 1.0:
        raise ValueError(f"temperature must be in (0, 1], got {T}; "
                         "use decode_mode for the T->0 limit")
    f = _sharpen(Zhat.probs, T)
    return (f @ bins.centers).astype(np.float32)


def decode_mode(Zhat: ColorDistribution, bins: GamutBins) -> np.ndarray:
    """Per-pixel modal bin center, ties to the smallest index."""
    return bins.centers[np.argmax(Zhat.probs, axis=-1)].astype(np.float32)


def export_probability_maps(Zhat: ColorDistribution, bins: GamutBins,
                            stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Subsampled per-bin spatial probability planes for visualization.

    Returns (bin_indices, maps) with maps of shape (len(bin_indices), H, W),
    taking every ``stride``-th bin.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    indices = np.arange(0, bins.q, stride)
    maps = np.moveaxis(Zhat.probs[:, :, indices], -1, 0).copy()
    return indices, maps
