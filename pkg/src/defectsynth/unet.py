"""Conditional epsilon-prediction denoiser: a two-level U-Net.

Levels run at the latent resolution and at half resolution; each level has
conv residual blocks and one text cross-attention block (W_q, W_k, W_v).
Timesteps are embedded through a learned table. Fixed sinusoidal coordinate
features are added to attention queries so conditioning can address
positions; they are buffers, not parameters.

The cross-attention blocks accept an optional adapter (decoupled K'/V'
branch, blended with weight gamma); a missing adapter equals an adapter
whose conditioning feature is all-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .adapter import Adapter, decoupled_cross_attention
from .errors import ShapeError
from .nn import conv2d, coord_features, kaiming_init, normal_init
from .seeding import params_hash, stream_seed
from .tensor import Tensor


def _sinusoidal_table(rows: int, dim: int) -> np.ndarray:
    t = np.arange(rows, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :dim]


@dataclass(frozen=True)
class DenoiserConfig:
    latent_size: int = 8
    latent_channels: int = 48
    width: int = 32            # level-0 channels; level 1 runs at 2x
    text_width: int = 32
    temb_dim: int = 32
    T: int = 1000
    seed: int = 0
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def attn_widths(self) -> tuple[int, int]:
        return (self.width, 2 * self.width)


class Denoiser:
    def __init__(self, config: DenoiserConfig, trainable: bool = True):
        self.config = config
        c = config
        dt = c.np_dtype
        rng = stream_seed(c.seed, "denoiser")
        w = c.width
        p: dict[str, np.ndarray] = {}

        def conv(name, cin, cout, zero=False):
            fan = 9 * cin
            p[f"{name}.w"] = (np.zeros((fan, cout), dtype=dt) if zero
                              else kaiming_init(rng, (fan, cout), fan, dt))
            p[f"{name}.b"] = np.zeros(cout, dtype=dt)

        def res(name, cin, cout):
            p[f"{name}.ln_g"] = np.ones(cin, dtype=dt)
            p[f"{name}.ln_b"] = np.zeros(cin, dtype=dt)
            conv(f"{name}.c1", cin, cout)
            p[f"{name}.temb_w"] = normal_init(rng, (c.temb_dim, cout), 0.1, dt)
            p[f"{name}.temb_b"] = np.zeros(cout, dtype=dt)
            conv(f"{name}.c2", cout, cout)
            if cin != cout:
                p[f"{name}.skip_w"] = kaiming_init(rng, (cin, cout), cin, dt)

        def attn(name, ch):
            # aligned init: queries and keys start as scaled identities, so
            # coordinate codes in the conditioning match coordinate features
            # in the queries from step one; learning only reweights this
            p[f"{name}.ln_g"] = np.ones(ch, dtype=dt)
            p[f"{name}.ln_b"] = np.zeros(ch, dtype=dt)
            eye_q = np.eye(ch, dtype=dt)
            eye_k = np.eye(c.text_width, ch, dtype=dt)
            p[f"{name}.wq"] = (0.6 * eye_q
                               + normal_init(rng, (ch, ch), 0.3 / math.sqrt(ch), dt))
            p[f"{name}.wk"] = (0.6 * eye_k
                               + normal_init(rng, (c.text_width, ch), 0.3 / math.sqrt(c.text_width), dt))
            p[f"{name}.wv"] = normal_init(rng, (c.text_width, ch), 1.0 / math.sqrt(c.text_width), dt)

        conv("stem", c.latent_channels, w)
        # learned table, sinusoidally initialized so rows start smooth in t
        p["temb.table"] = _sinusoidal_table(c.T + 1, c.temb_dim).astype(dt)
        res("res0", w, w)
        attn("attn0", w)
        res("res1", w, 2 * w)
        attn("attn1", 2 * w)
        res("mid", 2 * w, 2 * w)
        conv("fuse", 3 * w, w)
        res("resu", w, w)
        p["head.ln_g"] = np.ones(w, dtype=dt)
        p["head.ln_b"] = np.zeros(w, dtype=dt)
        conv("head", w, c.latent_channels, zero=True)  # zero-init: eps_hat starts at 0

        self.params: dict[str, Tensor] = {
            k: Tensor(v, requires_grad=trainable) for k, v in p.items()
        }
        s = c.latent_size
        # coordinate-dominant queries: spatial selectivity of the conditioning
        # attention must be available structurally, not discovered by SGD
        self._coords = {
            s: coord_features(s, s, w, scale=4.0).astype(dt),
            s // 2: coord_features(s // 2, s // 2, 2 * w, scale=4.0).astype(dt),
        }

    # -- parameter plumbing ------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ShapeError(f"state dict key mismatch: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.data.shape:
                raise ShapeError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(t.data.dtype).copy()

    def params_hash(self) -> str:
        return params_hash({k: t.data for k, t in self.params.items()})

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward -----------------------------------------------------------

    def _res(self, x: Tensor, name: str, temb: Tensor) -> Tensor:
        cin = x.shape[-1]
        h = tt.layer_norm(x, self._p(f"{name}.ln_g"), self._p(f"{name}.ln_b"))
        h = conv2d(h, self._p(f"{name}.c1.w"), self._p(f"{name}.c1.b"))
        tvec = tt.add(tt.matmul(temb, self._p(f"{name}.temb_w")), self._p(f"{name}.temb_b"))
        h = tt.add(h, tt.reshape(tvec, (x.shape[0], 1, 1, h.shape[-1])))
        h = tt.gelu(h)
        h = conv2d(h, self._p(f"{name}.c2.w"), self._p(f"{name}.c2.b"))
        if f"{name}.skip_w" in self.params:
            bsz, hh, ww, _ = x.shape
            flat = tt.reshape(x, (bsz, hh * ww, cin))
            x = tt.reshape(tt.matmul(flat, self._p(f"{name}.skip_w")), h.shape)
        return tt.add(x, h)

    def _attn(self, x: Tensor, name: str, cond: Tensor, cm_feat: Tensor | None,
              adapter: Adapter | None, level: int) -> Tensor:
        bsz, h, w, ch = x.shape
        z = tt.reshape(x, (bsz, h * w, ch))
        zn = tt.layer_norm(z, self._p(f"{name}.ln_g"), self._p(f"{name}.ln_b"))
        queries = tt.add(zn, Tensor(self._coords[h]))
        ablock = adapter.block(level) if adapter is not None else None
        if adapter is not None and cm_feat is None:
            cm_feat = Tensor(np.zeros((bsz, adapter.config.feat_len, adapter.config.cm_width),
                                      dtype=x.data.dtype))
        out = decoupled_cross_attention(
            queries, cond, cm_feat,
            self._p(f"{name}.wq"), self._p(f"{name}.wk"), self._p(f"{name}.wv"),
            ablock, adapter.gamma if adapter is not None else 0.0,
        )
        return tt.add(x, tt.reshape(out, (bsz, h, w, ch)))

    def forward(self, z_t: Tensor | np.ndarray, t, cond: Tensor | np.ndarray,
                cm_feat: Tensor | np.ndarray | None = None,
                adapter: Adapter | None = None) -> Tensor:
        """Predict epsilon for a [B,h,w,c] noisy latent batch.

        cond is the (possibly zeroed) text embedding [B,L,text_width];
        cm_feat the cross-modal feature [B,Lr,cm_width] or None.
        """
        c = self.config
        x = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=c.np_dtype))
        if x.ndim != 4 or x.shape[1] != c.latent_size or x.shape[-1] != c.latent_channels:
            raise ShapeError(
                f"expected [B,{c.latent_size},{c.latent_size},{c.latent_channels}] latent, got {x.shape}"
            )
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=c.np_dtype))
        if cond.ndim != 3 or cond.shape[0] != x.shape[0] or cond.shape[-1] != c.text_width:
            raise ShapeError(f"expected [B,L,{c.text_width}] text conditioning, got {cond.shape}")
        if cm_feat is not None and not isinstance(cm_feat, Tensor):
            cm_feat = Tensor(np.asarray(cm_feat, dtype=c.np_dtype))

        tv = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if tv.shape[0] == 1 and x.shape[0] > 1:
            tv = np.repeat(tv, x.shape[0])
        temb = tt.take_rows(self._p("temb.table"), tv)

        h0 = conv2d(x, self._p("stem.w"), self._p("stem.b"))
        h0 = self._res(h0, "res0", temb)
        h0 = self._attn(h0, "attn0", cond, cm_feat, adapter, level=0)
        h1 = tt.avg_pool2(h0)
        h1 = self._res(h1, "res1", temb)
        h1 = self._attn(h1, "attn1", cond, cm_feat, adapter, level=1)
        h1 = self._res(h1, "mid", temb)
        u = tt.upsample2(h1)
        u = tt.concat([u, h0], axis=3)
        u = tt.gelu(conv2d(u, self._p("fuse.w"), self._p("fuse.b")))
        u = self._res(u, "resu", temb)
        u = tt.layer_norm(u, self._p("head.ln_g"), self._p("head.ln_b"))
        return conv2d(u, self._p("head.w"), self._p("head.b"))

    def mid_features(self, z: np.ndarray, t: int) -> np.ndarray:
        """Bottleneck activations for the diversity proxy (unconditional)."""
        c = self.config
        bsz = z.shape[0]
        cond = np.zeros((bsz, 1, c.text_width), dtype=c.np_dtype)
        x = Tensor(np.asarray(z, dtype=c.np_dtype))
        temb = tt.take_rows(self._p("temb.table"), np.full(bsz, t, dtype=np.int64))
        h0 = conv2d(x, self._p("stem.w"), self._p("stem.b"))
        h0 = self._res(h0, "res0", temb)
        h0 = self._attn(h0, "attn0", Tensor(cond), None, None, level=0)
        h1 = tt.avg_pool2(h0)
        h1 = self._res(h1, "res1", temb)
        h1 = self._attn(h1, "attn1", Tensor(cond), None, None, level=1)
        h1 = self._res(h1, "mid", temb)
        return h1.data.reshape(bsz, -1)


def denoise(z_t, t, cond, cm_feat, denoiser: Denoiser, adapter: Adapter | None = None) -> Tensor:
    """Epsilon prediction (batched). cm_feat None means the adapter branch
    runs over a zero feature, contributing exactly nothing."""
    return denoiser.forward(z_t, t, cond, cm_feat, adapter)
