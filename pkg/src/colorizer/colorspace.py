"""sRGB <-> CIE Lab conversion and lightness/chroma channel handling.

All conversions run in double precision internally; image planes are stored
as float32. D65 white point, 2 degree observer, standard sRGB companding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

# White point taken from the matrix row sums so that (255,255,255) lands on
# exactly L=100, a=b=0 regardless of how the matrix constants were rounded.
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


@dataclass
class RgbImage:
    """8-bit sRGB image. ``data`` is (height, width, 3) uint8, row major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint8:
            raise ValueError(f"RgbImage data must be uint8, got {self.data.dtype}")
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"RgbImage data must be (H, W, 3), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("RgbImage must be at least 1x1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class LabImage:
    """CIE Lab image stored as three float32 planes of shape (height, width).

    L is lightness in [0, 100]; a and b are the chroma axes with nominal
    range [-128, 128].
    """

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.L = np.ascontiguousarray(self.L, dtype=np.float32)
        self.a = np.ascontiguousarray(self.a, dtype=np.float32)
        self.b = np.ascontiguousarray(self.b, dtype=np.float32)
        if self.L.ndim != 2:
            raise ValueError(f"Lab planes must be 2-D, got {self.L.shape}")
        if self.L.shape != self.a.shape or self.L.shape != self.b.shape:
            raise ValueError("L, a, b planes must share one shape")
        if self.L.shape[0] < 1 or self.L.shape[1] < 1:
            raise ValueError("LabImage must be at least 1x1")

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    # np.maximum guards the fractional power against negative (out-of-gamut)
    # inputs in the lane the linear branch discards anyway.
    return np.where(c <= 0.0031308,
                    12.92 * c,
                    1.055 * np.power(np.maximum(c, 0.0), 1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3.0 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > _DELTA, f ** 3, 3.0 * _DELTA ** 2 * (f - 4.0 / 29.0))


def srgb_to_lab(img: RgbImage) -> LabImage:
    """Convert an 8-bit sRGB image to CIE Lab."""
    rgb = img.data.astype(np.float64) / 255.0
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return LabImage(L=L, a=a, b=b)


def lab_to_linear_rgb(L: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lab planes to pre-clip linear-light RGB, shape (..., 3), float64.

    Values outside [0, 1] mean the Lab color is outside the sRGB gamut;
    this is the quantity the gamut test thresholds.
    """
    L = np.asarray(L, dtype=np.float64)
    fy = (L + 16.0) / 116.0
    fx = fy + np.asarray(a, dtype=np.float64) / 500.0
    fz = fy - np.asarray(b, dtype=np.float64) / 200.0
    fx, fy, fz = np.broadcast_arrays(fx, fy, fz)
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    return xyz @ _XYZ_TO_RGB.T


def lab_to_srgb(img: LabImage) -> RgbImage:
    """Convert Lab back to 8-bit sRGB.

    Out-of-gamut values are clipped channel-wise; quantization rounds half
    away from zero.
    """
    lin = lab_to_linear_rgb(img.L, img.a, img.b)
    v = np.clip(_linear_to_srgb(lin) * 255.0, 0.0, 255.0)
    return RgbImage(data=np.floor(v + 0.5).astype(np.uint8))


def split_channels(img: LabImage) -> tuple[np.ndarray, np.ndarray]:
    """Split into the lightness input X (H, W) and chroma target Y (H, W, 2)."""
    return img.L, np.stack([img.a, img.b], axis=-1)


def recombine_channels(X: np.ndarray, Y: np.ndarray) -> LabImage:
    """Inverse of :func:`split_channels`; bit-exact."""
    return LabImage(L=X, a=Y[..., 0], b=Y[..., 1])
