"""Deterministic synthetic image fixtures.

Images combine a smooth low-chroma background whose tint is a fixed function
of its lightness ramp (fully learnable from grayscale) with large striped
shapes whose hue is drawn from a skewed palette keyed to stripe orientation.
Given only grayscale structure, a shape's color is genuinely multimodal with
a dominant mode: regression-to-the-mean objectives settle on the washed-out
average while classification objectives can learn the skewed posterior and
commit to its mode at decode time.
"""

from pathlib import Path

import numpy as np

from colorizer.colorspace import RgbImage
from colorizer.dataio import write_ppm

# wheel-spread hue triples per stripe orientation, sampled with the skewed
# probabilities below so the per-texture color posterior has a clear mode
# whose ab mean is still near gray
HUES = {
    0: np.array([[200, 40, 40], [50, 180, 60], [40, 80, 220]], dtype=np.float64),
    1: np.array([[230, 130, 30], [40, 190, 200], [200, 60, 190]], dtype=np.float64),
}
HUE_WEIGHTS = np.array([0.5, 0.3, 0.2])


def synthetic_image(index: int, size: int = 64, seed: int = 0) -> RgbImage:
    rng = np.random.default_rng((seed, index))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ny, nx = yy / (size - 1), xx / (size - 1)

    # background gradient; tint derives from the ramp's dark end, so the
    # background color is predictable from lightness alone
    lo, hi = rng.uniform(60, 110), rng.uniform(150, 200)
    axis = rng.uniform(size=2)
    g = lo + (hi - lo) * (axis[0] * ny + axis[1] * nx) / max(axis.sum(), 1e-6)
    phase = 2 * np.pi * ((lo * 0.618) % 1.0)
    tint = 10.0 * np.array([np.cos(phase), np.cos(phase + 2.1), np.cos(phase + 4.2)])
    img = np.clip(g[..., None] + tint, 0, 255)

    for _ in range(rng.integers(2, 4)):
        orientation = int(rng.integers(0, 2))
        color = HUES[orientation][rng.choice(3, p=HUE_WEIGHTS)]
        color = color * rng.uniform(0.85, 1.1)
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        if rng.uniform() < 0.5:
            r = rng.uniform(0.14, 0.30) * size
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, hw = rng.uniform(0.12, 0.28, size=2) * size
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < hw)
        stripes = ((yy if orientation == 0 else xx) // 2) % 2
        fill = color[None, None, :] * np.where(stripes, 1.15, 0.85)[..., None]
        img = np.where(mask[..., None], np.clip(fill, 0, 255), img)

    return RgbImage(data=np.floor(img + 0.5).astype(np.uint8))


def make_fixture_dir(directory, n: int, size: int = 64, seed: int = 0) -> Path:
    """Write n synthetic PPMs named so lexicographic order equals index order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_ppm(directory / f"img{i:05d}.ppm", synthetic_image(i, size, seed))
    return directory
