"""Procedural background textures standing in for defect-free product images.

All generators are deterministic functions of (kind, seed) and emit values
inside [0.1, 0.9]: the headroom guarantees that any defect intensity shift
of magnitude >= 0.05 visibly changes every masked pixel.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EnumerationError, ValidationError
from .seeding import stream_seed
from .vocab import TEXTURE_KINDS

LO, HI = 0.1, 0.9


def _validate_size(size: int) -> None:
    if size < 16 or size % 2 != 0:
        raise ValidationError(f"texture size must be even and >= 16, got {size}")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _two_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    c0 = rng.uniform(0.2, 0.45, size=3)
    c1 = rng.uniform(0.55, 0.8, size=3)
    return c0, c1


def _stripes(rng, size):
    yy, xx = _grid(size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / size + phase)
    w = 0.5 * (wave + 1.0)
    c0, c1 = _two_colors(rng)
    return w[..., None] * c1 + (1.0 - w[..., None]) * c0


def _checker(rng, size):
    cell = int(rng.choice([4, 8]))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = _grid(size)
    parity = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    c0, c1 = _two_colors(rng)
    return parity[..., None] * c1 + (1.0 - parity[..., None]) * c0


def _noise(rng, size):
    raw = rng.random((size, size, 3))
    sigma = rng.uniform(1.0, 2.0)
    smooth = gaussian_filter(raw, sigma=(sigma, sigma, 0.0), mode="wrap")
    centered = smooth - smooth.mean(axis=(0, 1), keepdims=True)
    sd = centered.std()
    if sd > 0:
        centered = centered * (0.12 / sd)
    return 0.5 + centered


def _cellular(rng, size):
    k = int(rng.integers(4, 9))
    centers = rng.uniform(0, size, size=(k, 2))
    colors = rng.uniform(0.2, 0.8, size=(k, 3))
    yy, xx = _grid(size)
    # toroidal distance keeps cells seamless at the border
    dy = np.abs(yy[..., None] - centers[:, 0])
    dx = np.abs(xx[..., None] - centers[:, 1])
    dy = np.minimum(dy, size - dy)
    dx = np.minimum(dx, size - dx)
    nearest = np.argmin(dy * dy + dx * dx, axis=-1)
    return colors[nearest]


_GENERATORS = {
    "stripes": _stripes,
    "checker": _checker,
    "noise": _noise,
    "cellular": _cellular,
}

assert set(_GENERATORS) == set(TEXTURE_KINDS)


def gen_normal(texture_kind: str, seed: int, size: int) -> np.ndarray:
    """Deterministic [size, size, 3] texture with values in [0.1, 0.9]."""
    _validate_size(size)
    gen = _GENERATORS.get(texture_kind)
    if gen is None:
        raise EnumerationError(
            f"unsupported texture kind {texture_kind!r}; expected one of {sorted(_GENERATORS)}"
        )
    rng = stream_seed(seed, f"texture.{texture_kind}")
    img = gen(rng, size)
    return np.clip(img, LO, HI)
