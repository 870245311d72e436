"""Exactly invertible pixel/latent codec via space-to-depth.

encode rearranges f x f pixel blocks into channels and applies the fixed
affine map (x - MU) / SIGMA. SIGMA is a power of two and inputs live in
[0,1], so the affine step is exact in IEEE arithmetic and decode(encode(x))
reproduces x bitwise (and vice versa for in-range latents).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MU = 0.5
SIGMA = 0.25


@dataclass(frozen=True)
class LatentSpec:
    factor: int = 4

    @property
    def channels(self) -> int:
        return 3 * self.factor * self.factor

    def check(self, h: int, w: int) -> None:
        if h % self.factor or w % self.factor:
            raise ShapeError(
                f"image size {h}x{w} not divisible by downsample factor {self.factor}"
            )


def encode(image: np.ndarray, spec: LatentSpec) -> np.ndarray:
    """[H,W,3] -> [H/f, W/f, 3*f*f] normalized latent."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] image, got {image.shape}")
    h, w, _ = image.shape
    spec.check(h, w)
    f = spec.factor
    blocks = image.reshape(h // f, f, w // f, f, 3)
    latent = blocks.transpose(0, 2, 1, 3, 4).reshape(h // f, w // f, spec.channels)
    return (latent - MU) / SIGMA


def decode(latent: np.ndarray, spec: LatentSpec) -> np.ndarray:
    """Exact inverse of encode. No clamping here; clamp only at file write."""
    if latent.ndim != 3 or latent.shape[2] != spec.channels:
        raise ShapeError(
            f"expected [h,w,{spec.channels}] latent for factor {spec.factor}, got {latent.shape}"
        )
    f = spec.factor
    hs, ws, _ = latent.shape
    x = latent * SIGMA + MU
    blocks = x.reshape(hs, ws, f, f, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(hs * f, ws * f, 3)


def downsample_mask(mask: np.ndarray, spec: LatentSpec) -> np.ndarray:
    """[H,W] pixel mask -> [H/f, W/f] patch mask; a patch is set iff any
    covered pixel is set (never drops anomaly evidence)."""
    if mask.ndim != 2:
        raise ShapeError(f"expected [H,W] mask, got {mask.shape}")
    h, w = mask.shape
    spec.check(h, w)
    f = spec.factor
    blocks = (np.asarray(mask) > 0).reshape(h // f, f, w // f, f)
    return blocks.any(axis=(1, 3)).astype(np.uint8)
