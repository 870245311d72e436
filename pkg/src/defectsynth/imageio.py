"""8-bit PNG I/O for images (RGB) and masks (single channel, {0,255})."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def save_image(path: str | Path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected [H,W,3] image, got {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValidationError(f"expected [H,W] mask, got {m.shape}")
    Image.fromarray((m > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_contact_sheet(path: str | Path, images: list[np.ndarray], cols: int = 8,
                       pad: int = 2) -> None:
    """Tile images (same size, [H,W,3] floats) into one PNG grid."""
    if not images:
        raise ValidationError("contact sheet needs at least one image")
    h, w = images[0].shape[:2]
    cols = min(cols, len(images))
    rows = (len(images) + cols - 1) // cols
    sheet = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for idx, img in enumerate(images):
        r, c = divmod(idx, cols)
        y0 = pad + r * (h + pad)
        x0 = pad + c * (w + pad)
        sheet[y0:y0 + h, x0:x0 + w] = np.clip(img, 0.0, 1.0)
    save_image(path, sheet)
