"""Parametric surface defects and exact-support injection.

A DefectSpec fully determines the rendered mask; `inject_defect` then
changes exactly the masked pixels (reflected at the [0,1] bounds so a
nonzero intensity delta always lands on a different value).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EnumerationError, ValidationError
from .seeding import stream_seed
from .vocab import DEFECT_KINDS

MAX_MASK_FRACTION = 0.25
MAX_ABS_DELTA = 0.6


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    points: tuple[tuple[float, float], ...] = ()  # (y, x) control points / centers
    radius: float = 2.0
    thickness: float = 1.0
    branches: int = 2
    delta: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise EnumerationError(
                f"unsupported defect kind {self.kind!r}; expected one of {DEFECT_KINDS}"
            )
        if abs(self.delta) > MAX_ABS_DELTA:
            raise ValidationError(f"|delta| must be <= {MAX_ABS_DELTA}, got {self.delta}")


def _segment_mask(size: int, p0, p1, half_width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y0, x0 = p0
    y1, x1 = p1
    dy, dx = y1 - y0, x1 - x0
    seg2 = dy * dy + dx * dx
    if seg2 == 0.0:
        raise ValidationError(f"zero-length polyline segment at {p0}")
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / seg2, 0.0, 1.0)
    d2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
    return d2 <= half_width * half_width


def _disk_mask(size: int, center, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _scratch(spec: DefectSpec, size: int) -> np.ndarray:
    if len(spec.points) < 2:
        raise ValidationError("scratch needs at least two polyline control points")
    mask = np.zeros((size, size), dtype=bool)
    hw = max(spec.thickness * 0.5, 0.5)
    for p0, p1 in zip(spec.points[:-1], spec.points[1:]):
        mask |= _segment_mask(size, p0, p1, hw)
    return mask


def _spot(spec: DefectSpec, size: int) -> np.ndarray:
    if len(spec.points) != 1:
        raise ValidationError("spot needs exactly one center point")
    if spec.radius <= 0:
        raise ValidationError("spot radius must be positive")
    return _disk_mask(size, spec.points[0], spec.radius)


def _crack(spec: DefectSpec, size: int) -> np.ndarray:
    if len(spec.points) != 1:
        raise ValidationError("crack needs exactly one start point")
    rng = stream_seed(spec.seed, "defect.crack")
    mask = np.zeros((size, size), dtype=bool)

    def walk(y, x, heading, steps):
        for _ in range(steps):
            heading += rng.normal(0.0, 0.45)
            ny = y + 1.4 * np.sin(heading)
            nx = x + 1.4 * np.cos(heading)
            ny = float(np.clip(ny, 1, size - 2))
            nx = float(np.clip(nx, 1, size - 2))
            n = max(int(np.hypot(ny - y, nx - x) * 2) + 1, 2)
            ys = np.clip(np.round(np.linspace(y, ny, n)).astype(int), 0, size - 1)
            xs = np.clip(np.round(np.linspace(x, nx, n)).astype(int), 0, size - 1)
            mask[ys, xs] = True
            y, x = ny, nx
        return y, x

    y0, x0 = spec.points[0]
    heading = rng.uniform(0, 2 * np.pi)
    main_len = int(rng.integers(8, 14))
    ym, xm = walk(float(y0), float(x0), heading, main_len)
    for _ in range(max(spec.branches, 0)):
        by, bx = (float(y0) + ym) / 2.0, (float(x0) + xm) / 2.0
        walk(by, bx, rng.uniform(0, 2 * np.pi), int(rng.integers(3, 7)))
    return mask


def _contamination(spec: DefectSpec, size: int) -> np.ndarray:
    if len(spec.points) < 1:
        raise ValidationError("contamination needs at least one blob center")
    rng = stream_seed(spec.seed, "defect.contamination")
    mask = np.zeros((size, size), dtype=bool)
    for center in spec.points:
        r = spec.radius * rng.uniform(0.6, 1.0)
        if r <= 0:
            raise ValidationError("contamination radius must be positive")
        mask |= _disk_mask(size, center, r)
    return mask


_RENDERERS = {
    "scratch": _scratch,
    "spot": _spot,
    "crack": _crack,
    "contamination": _contamination,
}


def render_mask(spec: DefectSpec, size: int) -> np.ndarray:
    """Binary defect support as uint8 {0,1}; independent of any image."""
    for y, x in spec.points:
        if not (0 <= y < size and 0 <= x < size):
            raise ValidationError(f"defect point ({y}, {x}) outside image bounds {size}")
    mask = _RENDERERS[spec.kind](spec, size)
    if not mask.any():
        raise ValidationError("degenerate defect geometry produced an empty mask")
    if mask.mean() > MAX_MASK_FRACTION:
        raise ValidationError(
            f"defect covers {mask.mean():.1%} of the image, limit is {MAX_MASK_FRACTION:.0%}"
        )
    return mask.astype(np.uint8)


def inject_defect(image: np.ndarray, spec: DefectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render the defect into a copy of `image`.

    Pixels outside the mask are bitwise unchanged. For a nonzero delta,
    every masked pixel value changes (shift, reflected at the [0,1] bounds).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected [H,W,3] image, got shape {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise ValidationError("only square images are supported")
    size = image.shape[0]
    mask = render_mask(spec, size)
    out = image.copy()
    if spec.delta != 0.0:
        sel = mask.astype(bool)
        vals = image[sel] + spec.delta
        over = vals > 1.0
        vals[over] = 2.0 - vals[over]
        under = vals < 0.0
        vals[under] = -vals[under]
        stuck = vals == image[sel]
        if stuck.any():
            vals[stuck] = image[sel][stuck] - spec.delta
        out[sel] = vals
    return out, mask


def random_spec(kind: str, size: int, rng: np.random.Generator,
                delta_range: tuple[float, float] = (0.25, 0.5)) -> DefectSpec:
    """Sample plausible geometry for `kind`, fitting inside the image."""
    if kind not in _RENDERERS:
        raise EnumerationError(
            f"unsupported defect kind {kind!r}; expected one of {DEFECT_KINDS}"
        )
    lo, hi = size * 0.2, size * 0.8
    delta = float(rng.uniform(*delta_range)) * (1.0 if rng.random() < 0.5 else -1.0)
    seed = int(rng.integers(0, 2**31 - 1))
    if kind == "scratch":
        y0, x0 = rng.uniform(lo, hi, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(size * 0.3, size * 0.55)
        pts = [(y0, x0)]
        for frac in (0.5, 1.0):
            y = float(np.clip(y0 + np.sin(angle) * length * frac + rng.normal(0, 1), 1, size - 2))
            x = float(np.clip(x0 + np.cos(angle) * length * frac + rng.normal(0, 1), 1, size - 2))
            pts.append((y, x))
        return DefectSpec(kind, tuple(pts), thickness=float(rng.uniform(1.0, 2.2)),
                          delta=delta, seed=seed)
    if kind == "spot":
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        return DefectSpec(kind, (center,), radius=float(rng.uniform(2.0, size * 0.12)),
                          delta=delta, seed=seed)
    if kind == "crack":
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        return DefectSpec(kind, (center,), branches=int(rng.integers(1, 4)),
                          delta=delta, seed=seed)
    centers = tuple(
        (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        for _ in range(int(rng.integers(2, 5)))
    )
    return DefectSpec("contamination", centers, radius=float(rng.uniform(1.5, 3.0)),
                      delta=delta, seed=seed)
