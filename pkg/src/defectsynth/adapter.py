"""Decoupled cross-attention adapter and dual-condition dropout.

The adapter owns one (W_k', W_v') pair per denoiser cross-attention block
plus the global blend weight gamma. W_v' starts at zero so a fresh adapter
leaves the base model's outputs exactly unchanged; these are the only
trainable parameters during adapter training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ShapeError, ValidationError
from .nn import normal_init
from .seeding import params_hash, stream_seed
from .tensor import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    cm_width: int = 32                 # conditioning feature width d_c
    feat_len: int = 8                  # conditioning sequence length
    widths: tuple[int, ...] = (32, 64)  # attention width d per denoiser level
    gamma: float = 1.0
    init_scale: float = 0.02
    seed: int = 0
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Adapter:
    def __init__(self, config: AdapterConfig, trainable: bool = True):
        self.config = config
        self.gamma = float(config.gamma)
        rng = stream_seed(config.seed, "adapter")
        dt = config.np_dtype
        self.params: dict[str, Tensor] = {}
        for level, d in enumerate(config.widths):
            wk = normal_init(rng, (config.cm_width, d), config.init_scale, dt)
            wv = np.zeros((config.cm_width, d), dtype=dt)
            self.params[f"block{level}.wk"] = Tensor(wk, requires_grad=trainable)
            self.params[f"block{level}.wv"] = Tensor(wv, requires_grad=trainable)

    def block(self, level: int) -> tuple[Tensor, Tensor]:
        return self.params[f"block{level}.wk"], self.params[f"block{level}.wv"]

    def trainable_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ShapeError(f"adapter state keys mismatch: {sorted(set(arrays) ^ set(self.params))}")
        for k, t in self.params.items():
            if arrays[k].shape != t.data.shape:
                raise ShapeError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(t.data.dtype).copy()

    def params_hash(self) -> str:
        return params_hash({k: t.data for k, t in self.params.items()})


def _t_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return tt.transpose(x, axes)


def decoupled_cross_attention(z: Tensor, cond: Tensor, cm_feat: Tensor | None,
                              wq: Tensor, wk: Tensor, wv: Tensor,
                              adapter_block: tuple[Tensor, Tensor] | None,
                              gamma: float) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V + gamma * softmax(Q K'^T / sqrt(d)) V'
    with Q = z wq, K/V from the text stream, K'/V' from the cross-modal one."""
    if z.shape[-1] != wq.shape[0]:
        raise ShapeError(f"query width {z.shape[-1]} != wq rows {wq.shape[0]}")
    if cond.shape[-1] != wk.shape[0]:
        raise ShapeError(f"text width {cond.shape[-1]} != wk rows {wk.shape[0]}")
    if not np.isfinite(gamma):
        raise ValidationError(f"gamma must be finite, got {gamma}")
    d = wq.shape[1]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    q = tt.matmul(z, wq)
    k = tt.matmul(cond, wk)
    v = tt.matmul(cond, wv)
    att = tt.softmax_rows(tt.scale(tt.matmul(q, _t_last(k)), inv_sqrt_d))
    out = tt.matmul(att, v)
    if adapter_block is not None and cm_feat is not None:
        wkp, wvp = adapter_block
        if cm_feat.shape[-1] != wkp.shape[0]:
            raise ShapeError(
                f"cross-modal width {cm_feat.shape[-1]} != adapter wk rows {wkp.shape[0]}"
            )
        kp = tt.matmul(cm_feat, wkp)
        vp = tt.matmul(cm_feat, wvp)
        attp = tt.softmax_rows(tt.scale(tt.matmul(q, _t_last(kp)), inv_sqrt_d))
        out = tt.add(out, tt.scale(tt.matmul(attp, vp), gamma))
    return out


def dropout_conditions(cond: np.ndarray, cm_feat: np.ndarray, u: float,
                       p: float) -> tuple[np.ndarray, np.ndarray]:
    """Mutually exclusive condition dropout from one uniform draw.

    u in [0,p) drops the text condition, [p,2p) the cross-modal one,
    [2p,3p) both; dropping replaces the array with zeros of its shape.
    """
    if not (0.0 <= p and 3.0 * p <= 1.0):
        raise ValidationError(f"dropout p must satisfy 0 <= 3p <= 1, got {p}")
    if not (0.0 <= u < 1.0):
        raise ValidationError(f"uniform draw must be in [0,1), got {u}")
    drop_cond = u < p or 2 * p <= u < 3 * p
    drop_cm = p <= u < 3 * p
    c = np.zeros_like(cond) if drop_cond else cond
    m = np.zeros_like(cm_feat) if drop_cm else cm_feat
    return c, m
