"""Training loops: base denoiser pre-training and adapter training.

Base pre-training fits the text-conditioned denoiser on the noise
regression objective (no pretrained backbone exists at this scale; this
phase manufactures one). Adapter training then runs the full loop per
step: draw a batch, noise the latents, reset the guidance offset, run the
inner refinement on each sample's reference, build the cross-modal
feature, and update only the adapter projections.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .adapter import Adapter, dropout_conditions
from .codec import LatentSpec, downsample_mask, encode
from .dataset import ManifestRow, load_row_image, prompt_pair_for_row
from .errors import FrozenParameterError, ValidationError
from .fusion import CrossModalEncoder, cross_modal_feature
from .guidance import optimize_guidance
from .optim import AdamW
from .schedule import DiffusionSchedule, q_sample
from .seeding import stream_seed
from .tensor import Tape, Tensor
from .text_encoder import TextEncoder
from .unet import Denoiser
from .vocab import TokenSpan, strip_position, tokenize


@dataclass
class TrainItem:
    row_id: int
    z0: np.ndarray                 # [h,w,c] latent
    text_emb: np.ndarray           # [L,tw] full targeted-text conditioning
    text_emb_stripped: np.ndarray  # same caption without the location clause
    e_t: np.ndarray | None = None  # reference embeddings (anomalous rows)
    e_v: np.ndarray | None = None
    span: TokenSpan | None = None
    patch_mask: np.ndarray | None = None


@dataclass
class TrainBatch:
    z0: np.ndarray        # [B,h,w,c]
    eps: np.ndarray       # [B,h,w,c]
    t: np.ndarray         # [B]
    text_emb: np.ndarray  # [B,L,tw]
    cm_feat: np.ndarray | None  # [B,Lr,dc] or None (base phase)


@dataclass
class LogRow:
    step: int
    loss: float
    ma_loss: float
    e0: float
    etg: float
    wall: float

    def tsv(self) -> str:
        return (f"{self.step}\t{self.loss:.6f}\t{self.ma_loss:.6f}\t"
                f"{self.e0:.6f}\t{self.etg:.6f}\t{self.wall:.3f}")


LOG_HEADER = "step\tloss\tma_loss\tE_0\tE_Tg\twall"


def load_train_items(manifest_path, rows: list[ManifestRow], text_enc: TextEncoder,
                     latent_spec: LatentSpec, vlm: CrossModalEncoder | None = None,
                     dtype=np.float64) -> list[TrainItem]:
    """Cache latents, text embeddings, and (with a vlm) reference embeddings."""
    by_id = {r.id: r for r in rows}
    items = []
    for row in rows:
        img = load_row_image(manifest_path, row)
        z0 = encode(img, latent_spec).astype(dtype)
        text = text_enc.encode(tokenize(row.target_text)).astype(dtype)
        stripped = text_enc.encode(
            tokenize(strip_position(row.target_text))).astype(dtype)
        item = TrainItem(row_id=row.id, z0=z0, text_emb=text,
                         text_emb_stripped=stripped)
        if vlm is not None and row.is_anomalous:
            pair = prompt_pair_for_row(manifest_path, by_id, row)
            e_t, e_v = vlm.embed_inputs(pair.reference_image, pair.reference_tokens)
            item.e_t, item.e_v = e_t, e_v
            item.span = pair.token_span
            patch_spec = LatentSpec(vlm.config.patch)
            item.patch_mask = downsample_mask(pair.anomaly_mask, patch_spec).reshape(-1)
        items.append(item)
    return items


def training_loss(batch: TrainBatch, denoiser: Denoiser, adapter: Adapter | None,
                  dropout_draws: np.ndarray | None, p_drop: float,
                  schedule: DiffusionSchedule) -> Tensor:
    """Mean squared noise-prediction error with dual condition dropout.

    dropout_draws holds one uniform per sample; None disables dropout.
    """
    if batch.z0.shape[0] == 0:
        raise ValidationError("empty training batch")
    z_t = q_sample(batch.z0, batch.t, batch.eps, schedule)
    cond = batch.text_emb
    cm = batch.cm_feat
    if dropout_draws is not None:
        cond = cond.copy()
        cm = cm.copy() if cm is not None else None
        for i, u in enumerate(dropout_draws):
            c_i, m_i = dropout_conditions(
                cond[i], cm[i] if cm is not None else np.zeros(1, cond.dtype), float(u), p_drop
            )
            cond[i] = c_i
            if cm is not None:
                cm[i] = m_i
    pred = denoiser.forward(z_t, batch.t, cond, cm, adapter)
    return tt.tmean(tt.square(tt.sub(pred, Tensor(batch.eps))))


def _moving_average(values: list[float], window: int = 50) -> float:
    tail = values[-window:]
    return float(np.mean(tail))


@dataclass
class TrainSettings:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    dropout: float = 0.1          # base phase: text dropout probability
    seed: int = 0
    guidance_steps: int = 3
    guidance_lr: float = 0.1


def pretrain_base(items: list[TrainItem], denoiser: Denoiser,
                  schedule: DiffusionSchedule, settings: TrainSettings) -> list[LogRow]:
    """Base-model pre-training: text conditioning only, epsilon regression."""
    if not items:
        raise ValidationError("no training items")
    opt = AdamW(denoiser.params, lr=settings.lr, weight_decay=settings.weight_decay)
    rng = stream_seed(settings.seed, "train.base")
    dtype = denoiser.config.np_dtype
    logs: list[LogRow] = []
    losses: list[float] = []
    t_start = time.perf_counter()
    for step in range(settings.steps):
        idx = rng.integers(0, len(items), size=settings.batch_size)
        z0 = np.stack([items[i].z0 for i in idx]).astype(dtype)
        eps = rng.standard_normal(z0.shape).astype(dtype)
        ts = rng.integers(1, schedule.T + 1, size=len(idx))
        # caption augmentation: half the draws drop the location clause so
        # the model also follows captions without one
        variants = rng.random(len(idx)) < 0.5
        cond = np.stack([
            (items[i].text_emb if keep else items[i].text_emb_stripped)
            for i, keep in zip(idx, variants)
        ]).astype(dtype)
        drops = rng.random(len(idx))
        cond[drops < settings.dropout] = 0.0
        batch = TrainBatch(z0=z0, eps=eps, t=ts, text_emb=cond, cm_feat=None)
        opt.zero_grad()
        with Tape() as tape:
            loss = training_loss(batch, denoiser, None, None, 0.0, schedule)
            tape.backward(loss)
        opt.step()
        losses.append(loss.item())
        logs.append(LogRow(step, losses[-1], _moving_average(losses), float("nan"),
                           float("nan"), time.perf_counter() - t_start))
    return logs


def adapter_train_step(batch_items: list[TrainItem], denoiser: Denoiser,
                       vlm: CrossModalEncoder, adapter: Adapter, opt: AdamW,
                       schedule: DiffusionSchedule, rng: np.random.Generator,
                       settings: TrainSettings, p_drop: float = 0.05) -> tuple[float, float, float]:
    """One full adapter update; returns (loss, mean E_0, mean E_Tg).

    The guidance offset is re-zeroed and re-optimized for every sample in
    every step; the optimizer touches only the adapter projections.
    """
    for name, p in denoiser.params.items():
        if p.requires_grad:
            raise FrozenParameterError(f"denoiser parameter {name} is not frozen")
    for name, p in vlm.params.items():
        if p.requires_grad:
            raise FrozenParameterError(f"cross-modal parameter {name} is not frozen")
    dtype = denoiser.config.np_dtype
    cms, e0s, etgs = [], [], []
    for it in batch_items:
        if it.e_t is None:
            raise ValidationError(f"row {it.row_id} lacks reference embeddings")
        res = optimize_guidance(it.e_t, it.e_v, it.span, it.patch_mask, vlm,
                                step_size=settings.guidance_lr, steps=settings.guidance_steps)
        cms.append(cross_modal_feature(it.e_t, it.e_v, res.e_g, vlm).astype(dtype))
        e0s.append(res.energies[0])
        etgs.append(res.energies[-1])
    z0 = np.stack([it.z0 for it in batch_items]).astype(dtype)
    eps = rng.standard_normal(z0.shape).astype(dtype)
    ts = rng.integers(1, schedule.T + 1, size=len(batch_items))
    # location clauses are withheld here: placement must be earned by the
    # cross-modal feature, not leaked through the caption
    cond = np.stack([it.text_emb_stripped for it in batch_items]).astype(dtype)
    batch = TrainBatch(z0=z0, eps=eps, t=ts, text_emb=cond, cm_feat=np.stack(cms))
    draws = rng.random(len(batch_items))
    opt.zero_grad()
    with Tape() as tape:
        loss = training_loss(batch, denoiser, adapter, draws, p_drop, schedule)
        tape.backward(loss)
    opt.step()
    return loss.item(), float(np.mean(e0s)), float(np.mean(etgs))


def train_adapter(items: list[TrainItem], denoiser: Denoiser, vlm: CrossModalEncoder,
                  adapter: Adapter, schedule: DiffusionSchedule,
                  settings: TrainSettings, p_drop: float = 0.05,
                  lr: float = 1e-4, weight_decay: float = 0.01) -> list[LogRow]:
    """Adapter training; denoiser and cross-modal stack must be frozen."""
    usable = [it for it in items if it.e_t is not None]
    if not usable:
        raise ValidationError("no anomalous training items with references")
    denoiser.set_trainable(False)
    for p in denoiser.params.values():
        p.grad = None
    opt = AdamW(adapter.trainable_params(), lr=lr, weight_decay=weight_decay)
    rng = stream_seed(settings.seed, "train.adapter")
    logs: list[LogRow] = []
    losses: list[float] = []
    t_start = time.perf_counter()
    for step in range(settings.steps):
        idx = rng.integers(0, len(usable), size=settings.batch_size)
        batch_items = [usable[i] for i in idx]
        loss, e0, etg = adapter_train_step(batch_items, denoiser, vlm, adapter, opt,
                                           schedule, rng, settings, p_drop)
        losses.append(loss)
        logs.append(LogRow(step, loss, _moving_average(losses), e0, etg,
                           time.perf_counter() - t_start))
    return logs


def write_log(path, logs: list[LogRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in logs:
            fh.write(row.tsv() + "\n")
