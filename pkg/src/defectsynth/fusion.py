"""Frozen cross-modal encoder fusing a reference image and caption.

Two multi-head cross-attention blocks (text queries over image patch
keys/values), each followed by a feed-forward block, all at seeded random
initialization and permanently frozen. The guided visual stream e_v + e_g
feeds every block. The final block's head-averaged attention is the map
the guidance loop optimizes; the projected text-stream output is the
conditioning feature handed to the adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from . import vocab
from .errors import ShapeError, VocabularyError
from .nn import coord_features, normal_init, orthogonal_init
from .seeding import params_hash, stream_seed
from .tensor import Tensor


@dataclass(frozen=True)
class FusionConfig:
    image_size: int = 32
    patch: int = 4
    width: int = 32          # stream width d_v
    heads: int = 2
    blocks: int = 2
    out_width: int = 32      # conditioning feature width d_c
    max_len: int = 8
    seed: int = 0
    dtype: str = "float64"
    # init gains, calibrated so a few small guidance steps can move
    # substantial attention mass without saturating the base softmax
    patch_gain: float = 0.8
    img_pos_scale: float = 0.15
    attn_gain: float = 4.0
    value_gain: float = 2.0

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch
        return side * side


class CrossModalEncoder:
    """Frozen parameter stack; hash-stable for a given seed."""

    def __init__(self, config: FusionConfig):
        if config.width % config.heads:
            raise ShapeError(f"width {config.width} not divisible by heads {config.heads}")
        if config.image_size % config.patch:
            raise ShapeError(
                f"image size {config.image_size} not divisible by patch {config.patch}"
            )
        self.config = config
        c = config
        dt = c.np_dtype
        rng = stream_seed(c.seed, "cross_modal_encoder")
        w = c.width
        side = c.image_size // c.patch
        p: dict[str, np.ndarray] = {
            "tok": (rng.standard_normal((vocab.vocab_size(), w)) * 0.5).astype(dt),
            "text_pos": (rng.standard_normal((c.max_len, w)) * 0.25).astype(dt),
            "patch_proj": orthogonal_init(rng, (3 * c.patch * c.patch, w), c.patch_gain, dt),
            "patch_bias": np.zeros(w, dtype=dt),
            # sinusoidal patch positions: the same normalized-coordinate family
            # the denoiser's attention queries use, so positional content in the
            # fused feature is expressed in a basis the adapter can match
            "img_pos": (coord_features(side, side, w, scale=c.img_pos_scale)).astype(dt),
            "out_proj": orthogonal_init(rng, (w, c.out_width), 1.0, dt),
        }
        for b in range(c.blocks):
            pre = f"block{b}."
            p[pre + "ln_g"] = np.ones(w, dtype=dt)
            p[pre + "ln_b"] = np.zeros(w, dtype=dt)
            p[pre + "wq"] = orthogonal_init(rng, (w, w), c.attn_gain, dt)
            p[pre + "wk"] = orthogonal_init(rng, (w, w), c.attn_gain, dt)
            p[pre + "wv"] = orthogonal_init(rng, (w, w), c.value_gain, dt)
            p[pre + "wo"] = orthogonal_init(rng, (w, w), 0.7, dt)
            p[pre + "ff_ln_g"] = np.ones(w, dtype=dt)
            p[pre + "ff_ln_b"] = np.zeros(w, dtype=dt)
            p[pre + "ff1"] = normal_init(rng, (w, 2 * w), 1.0 / np.sqrt(w), dt)
            p[pre + "ff1_b"] = np.zeros(2 * w, dtype=dt)
            p[pre + "ff2"] = normal_init(rng, (2 * w, w), 1.0 / np.sqrt(2 * w), dt)
            p[pre + "ff2_b"] = np.zeros(w, dtype=dt)
        # frozen: plain arrays wrapped as non-grad tensors, no setters
        self.params: dict[str, Tensor] = {k: Tensor(v) for k, v in p.items()}

    def params_hash(self) -> str:
        return params_hash({k: t.data for k, t in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- embeddings ---------------------------------------------------------

    def embed_inputs(self, image: np.ndarray, token_ids,
                     with_positions: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(e_t [L,w], e_v [P,w]) for a reference image and caption.

        with_positions=False is a test mode: without position embeddings,
        permuting two patches permutes the matching e_v rows.
        """
        c = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= vocab.vocab_size()):
            raise VocabularyError(f"token id out of range: {ids}")
        ids = vocab.pad_to(ids, c.max_len)
        if image.shape != (c.image_size, c.image_size, 3):
            raise ShapeError(
                f"expected [{c.image_size},{c.image_size},3] image, got {image.shape}"
            )
        dt = c.np_dtype
        e_t = self._p("tok").data[ids].copy()
        side = c.image_size // c.patch
        patches = image.astype(dt).reshape(side, c.patch, side, c.patch, 3)
        patches = patches.transpose(0, 2, 1, 3, 4).reshape(c.num_patches, -1)
        e_v = patches @ self._p("patch_proj").data + self._p("patch_bias").data
        if with_positions:
            e_t = e_t + self._p("text_pos").data
            e_v = e_v + self._p("img_pos").data
        return e_t.astype(dt), e_v.astype(dt)

    # -- stack forward --------------------------------------------------------

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        h = self.config.heads
        dh = self.config.width // h
        return tt.transpose(tt.reshape(x, (n, h, dh)), (1, 0, 2))

    def _forward(self, e_t: np.ndarray, e_v: np.ndarray,
                 e_g: Tensor | np.ndarray | None):
        c = self.config
        dt = c.np_dtype
        x = Tensor(np.asarray(e_t, dtype=dt))
        v_stream = Tensor(np.asarray(e_v, dtype=dt))
        if e_g is not None:
            g = e_g if isinstance(e_g, Tensor) else Tensor(np.asarray(e_g, dtype=dt))
            if g.shape != v_stream.shape:
                raise ShapeError(f"guidance shape {g.shape} != visual shape {v_stream.shape}")
            v_stream = tt.add(v_stream, g)
        L, P = x.shape[0], v_stream.shape[0]
        inv_sqrt = 1.0 / np.sqrt(c.width // c.heads)
        att_last = None
        for b in range(c.blocks):
            pre = f"block{b}."
            xn = tt.layer_norm(x, self._p(pre + "ln_g"), self._p(pre + "ln_b"))
            q = self._split_heads(tt.matmul(xn, self._p(pre + "wq")), L)
            k = self._split_heads(tt.matmul(v_stream, self._p(pre + "wk")), P)
            v = self._split_heads(tt.matmul(v_stream, self._p(pre + "wv")), P)
            logits = tt.scale(tt.matmul(q, tt.transpose(k, (0, 2, 1))), inv_sqrt)
            att = tt.softmax_rows(logits)           # [heads, L, P]
            att_last = att
            heads_out = tt.matmul(att, v)           # [heads, L, dh]
            merged = tt.reshape(tt.transpose(heads_out, (1, 0, 2)), (L, c.width))
            x = tt.add(x, tt.matmul(merged, self._p(pre + "wo")))
            fn = tt.layer_norm(x, self._p(pre + "ff_ln_g"), self._p(pre + "ff_ln_b"))
            ff = tt.matmul(tt.gelu(tt.add(tt.matmul(fn, self._p(pre + "ff1")),
                                          self._p(pre + "ff1_b"))),
                           self._p(pre + "ff2"))
            x = tt.add(x, tt.add(ff, self._p(pre + "ff2_b")))
        return x, att_last


def attention_map(e_t: np.ndarray, e_v: np.ndarray, e_g, vlm: CrossModalEncoder) -> Tensor:
    """Head-averaged final-block attention over the guided visual stream, [L,P]."""
    _, att = vlm._forward(e_t, e_v, e_g)
    return tt.tmean(att, axis=0)


def cross_modal_feature(e_t: np.ndarray, e_v: np.ndarray, e_g,
                        vlm: CrossModalEncoder) -> np.ndarray:
    """Full frozen-stack output projected to the adapter width, [L, d_c].

    Returned as a plain array: the guidance offset is treated as a constant
    after its inner-loop optimization, so no gradients flow from here.
    """
    x, _ = vlm._forward(e_t, e_v, e_g)
    return tt.matmul(x, vlm._p("out_proj")).data
