"""Parameter initialization and small network building blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .tensor import Tensor


def normal_init(rng: np.random.Generator, shape, scale: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


def kaiming_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return normal_init(rng, shape, math.sqrt(2.0 / fan_in), dtype)


def orthogonal_init(rng: np.random.Generator, shape, gain: float, dtype) -> np.ndarray:
    """Orthogonal-style init: QR of a normal matrix, scaled by gain."""
    rows, cols = shape
    n = max(rows, cols)
    a = rng.standard_normal((n, min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    w = q[:rows, :cols] if rows >= cols else q[:cols, :rows].T
    return (gain * w).astype(dtype)


def conv2d(x: Tensor, w: Tensor, b: Tensor, ksize: int = 3) -> Tensor:
    """'Same' stride-1 convolution on [B,H,W,Cin]; w is [k*k*Cin, Cout]."""
    bsz, h, wd, _ = x.shape
    cols = tt.im2col(x, ksize)
    y = tt.add(tt.matmul(cols, w), b)
    return tt.reshape(y, (bsz, h, wd, w.shape[1]))


def coord_features(h: int, w: int, dim: int, scale: float = 0.25) -> np.ndarray:
    """Fixed sinusoidal 2-d position features, [h*w, dim].

    Not parameters: a deterministic buffer that lets attention queries
    carry their spatial location.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    feats = np.zeros((h * w, dim), dtype=np.float64)
    for d in range(dim):
        freq = 1.0 + d // 4
        kind = d % 4
        if kind == 0:
            v = np.sin(2 * np.pi * freq * yy / h)
        elif kind == 1:
            v = np.cos(2 * np.pi * freq * yy / h)
        elif kind == 2:
            v = np.sin(2 * np.pi * freq * xx / w)
        else:
            v = np.cos(2 * np.pi * freq * xx / w)
        feats[:, d] = v.reshape(-1)
    return scale * feats
