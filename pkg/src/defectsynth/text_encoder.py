"""Frozen seeded text encoder producing the targeted-text conditioning C.

Embedding table plus one self-attention layer, evaluated in plain numpy:
the encoder is frozen everywhere, so no gradients ever flow through it.
Outputs are cached per token sequence.

Location words carry deterministic coordinate codes instead of random
embeddings: the mean sinusoidal coordinate feature of the image region
they name. Spatial conditioning then lives in the same basis the
denoiser's attention queries use, which is what makes placement
learnable at this scale.
"""

from __future__ import annotations

import numpy as np

from . import vocab
from .errors import VocabularyError
from .nn import coord_features, orthogonal_init
from .seeding import params_hash, stream_seed

# normalized (y, x) regions named by location words
_REGIONS = {
    "top": (0.0, 0.5, 0.0, 1.0),
    "bottom": (0.5, 1.0, 0.0, 1.0),
    "left": (0.0, 1.0, 0.0, 0.5),
    "right": (0.0, 1.0, 0.5, 1.0),
    "center": (0.25, 0.75, 0.25, 0.75),
}


def region_code(word: str, width: int, grid: int = 16, scale: float = 2.0) -> np.ndarray:
    """Mean coordinate feature over the region a location word names."""
    y0, y1, x0, x1 = _REGIONS[word]
    feats = coord_features(grid, grid, width, scale=1.0).reshape(grid, grid, width)
    ys = slice(int(y0 * grid), max(int(y1 * grid), int(y0 * grid) + 1))
    xs = slice(int(x0 * grid), max(int(x1 * grid), int(x0 * grid) + 1))
    return scale * feats[ys, xs].mean(axis=(0, 1))


class TextEncoder:
    def __init__(self, width: int = 32, max_len: int = 8, seed: int = 0,
                 dtype=np.float64):
        self.width = width
        self.max_len = max_len
        self.dtype = np.dtype(dtype)
        rng = stream_seed(seed, "text_encoder")
        v = vocab.vocab_size()
        w = width
        tok = (rng.standard_normal((v, w)) * 0.5).astype(self.dtype)
        for word in _REGIONS:
            tok[vocab.tokenize(word)[0]] = region_code(word, w).astype(self.dtype)
        self.params: dict[str, np.ndarray] = {
            "tok": tok,
            "pos": (rng.standard_normal((max_len, w)) * 0.25).astype(self.dtype),
            "wq": orthogonal_init(rng, (w, w), 1.0, self.dtype),
            "wk": orthogonal_init(rng, (w, w), 1.0, self.dtype),
            "wv": orthogonal_init(rng, (w, w), 1.0, self.dtype),
            "wo": orthogonal_init(rng, (w, w), 0.5, self.dtype),
            "ln_g": np.ones(w, dtype=self.dtype),
            "ln_b": np.zeros(w, dtype=self.dtype),
        }
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def params_hash(self) -> str:
        return params_hash(self.params)

    def encode(self, token_ids) -> np.ndarray:
        """[max_len, width] embedding of ids padded to max_len."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= vocab.vocab_size()):
            raise VocabularyError(f"token id out of range: {ids}")
        ids = vocab.pad_to(ids, self.max_len)
        key = tuple(int(i) for i in ids)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        p = self.params
        x = p["tok"][ids] + p["pos"]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        xn = xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + 1e-5)
        xn = xn * p["ln_g"] + p["ln_b"]
        q = xn @ p["wq"]
        k = xn @ p["wk"]
        v = xn @ p["wv"]
        logits = (q @ k.T) / np.sqrt(self.width).astype(self.dtype)
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        att = e / e.sum(axis=-1, keepdims=True)
        out = x + (att @ v) @ p["wo"]
        out = out.astype(self.dtype)
        self._cache[key] = out
        return out

    def zero_condition(self) -> np.ndarray:
        """The dropped-condition embedding: all zeros, same shape as encode()."""
        return np.zeros((self.max_len, self.width), dtype=self.dtype)
