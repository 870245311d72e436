"""Wiring between configuration, components, and the CLI commands."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, imageio
from .adapter import Adapter, AdapterConfig
from .codec import LatentSpec, encode
from .config import RunConfig, serialize_config
from .dataset import (
    DataConfig,
    ManifestRow,
    build_dataset,
    prompt_pair_for_row,
    read_manifest,
)
from .errors import FrozenParameterError, ValidationError
from .fusion import CrossModalEncoder, FusionConfig
from .metrics import MetricReport, config_hash_of
from .sampling import Sampler
from .schedule import DiffusionSchedule, make_schedule, q_sample
from .seeding import stream_seed
from .tensor import Tape, Tensor
from .text_encoder import TextEncoder
from .training import (
    LogRow,
    TrainSettings,
    load_train_items,
    pretrain_base,
    train_adapter,
    training_loss,
    write_log,
    TrainBatch,
)
from .unet import Denoiser, DenoiserConfig
from .vocab import targeted_caption


@dataclass
class Components:
    config: RunConfig
    schedule: DiffusionSchedule
    latent_spec: LatentSpec
    text_encoder: TextEncoder
    denoiser: Denoiser
    vlm: CrossModalEncoder
    adapter: Adapter


def build_components(cfg: RunConfig, trainable_denoiser: bool = False) -> Components:
    latent_spec = LatentSpec(cfg.latent_factor)
    latent_size = cfg.image_size // cfg.latent_factor
    schedule = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max, cfg.ddim_count)
    text_enc = TextEncoder(width=cfg.text_width, max_len=cfg.max_tokens,
                           seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    den_cfg = DenoiserConfig(
        latent_size=latent_size, latent_channels=latent_spec.channels,
        width=cfg.base_width, text_width=cfg.text_width, temb_dim=cfg.temb_dim,
        T=cfg.timesteps, seed=cfg.seed, dtype=cfg.dtype,
    )
    denoiser = Denoiser(den_cfg, trainable=trainable_denoiser)
    vlm = CrossModalEncoder(FusionConfig(
        image_size=cfg.image_size, patch=cfg.vlm_patch, width=cfg.vlm_width,
        heads=cfg.vlm_heads, out_width=cfg.cm_width, max_len=cfg.max_tokens,
        seed=cfg.seed, dtype=cfg.dtype,
    ))
    adapter = Adapter(AdapterConfig(
        cm_width=cfg.cm_width, feat_len=cfg.max_tokens, widths=den_cfg.attn_widths,
        gamma=cfg.gamma, seed=cfg.seed, dtype=cfg.dtype,
    ), trainable=False)
    return Components(cfg, schedule, latent_spec, text_enc, denoiser, vlm, adapter)


def data_config_from(cfg: RunConfig) -> DataConfig:
    return DataConfig(
        size=cfg.image_size, textures=cfg.texture_list(), defects=cfg.defect_list(),
        n_normal=cfg.n_normal, n_anomalous=cfg.n_anomalous,
        train_fraction=cfg.train_fraction, reference_pairing=cfg.reference_pairing,
        delta_min=cfg.delta_min, delta_max=cfg.delta_max,
    )


def make_sampler(comp: Components, use_asea: bool = True,
                 with_adapter: bool = True) -> Sampler:
    cfg = comp.config
    return Sampler(
        denoiser=comp.denoiser, text_encoder=comp.text_encoder, schedule=comp.schedule,
        latent_spec=comp.latent_spec,
        vlm=comp.vlm if with_adapter else None,
        adapter=comp.adapter if with_adapter else None,
        guidance_scale=cfg.guidance_scale, guidance_mode=cfg.guidance_mode,
        text_scale=cfg.text_scale, cm_scale=cfg.cm_scale,
        asea_steps=cfg.guidance_steps, asea_lr=cfg.guidance_lr,
        use_asea=use_asea, clamp_z0=cfg.clamp_z0,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out_dir: str | Path, force: bool = False) -> Path:
    data_dir = Path(out_dir) / cfg.data_dir
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise ValidationError(f"{data_dir} is not empty; pass --force to overwrite")
    return build_dataset(data_config_from(cfg), cfg.seed, data_dir)


def _manifest_path(cfg: RunConfig, out_dir) -> Path:
    p = Path(out_dir) / cfg.data_dir / "manifest.tsv"
    if not p.exists():
        raise ValidationError(f"dataset manifest not found at {p}; run gen-data first")
    return p


def fixed_eval_loss(comp: Components, items, seed: int = 123, batches: int = 4) -> float:
    """Deterministic held-out objective value; bitwise stable for a fixed
    checkpoint, used to verify checkpoint reload."""
    rng = stream_seed(seed, "eval_loss")
    dtype = comp.denoiser.config.np_dtype
    vals = []
    for _ in range(batches):
        idx = rng.integers(0, len(items), size=8)
        z0 = np.stack([items[i].z0 for i in idx]).astype(dtype)
        eps = rng.standard_normal(z0.shape).astype(dtype)
        ts = rng.integers(1, comp.schedule.T + 1, size=len(idx))
        cond = np.stack([items[i].text_emb for i in idx]).astype(dtype)
        batch = TrainBatch(z0=z0, eps=eps, t=ts, text_emb=cond, cm_feat=None)
        loss = training_loss(batch, comp.denoiser, None, None, 0.0, comp.schedule)
        vals.append(loss.item())
    return float(np.mean(vals))


def cmd_pretrain_base(cfg: RunConfig, out_dir: str | Path) -> tuple[Path, list[LogRow]]:
    manifest = _manifest_path(cfg, out_dir)
    rows = [r for r in read_manifest(manifest) if r.split == "train"]
    comp = build_components(cfg, trainable_denoiser=True)
    items = load_train_items(manifest, rows, comp.text_encoder, comp.latent_spec,
                             dtype=comp.denoiser.config.np_dtype)
    settings = TrainSettings(steps=cfg.base_steps, batch_size=cfg.batch_size,
                             lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                             dropout=cfg.base_dropout, seed=cfg.seed)
    logs = pretrain_base(items, comp.denoiser, comp.schedule, settings)
    ckpt = Path(out_dir) / cfg.base_ckpt
    checkpoint.save_arrays(ckpt, comp.denoiser.state_dict())
    write_log(Path(out_dir) / "base_log.tsv", logs)
    return ckpt, logs


def cmd_train_adapter(cfg: RunConfig, out_dir: str | Path) -> tuple[Path, list[LogRow]]:
    manifest = _manifest_path(cfg, out_dir)
    base_ckpt = Path(out_dir) / cfg.base_ckpt
    if not base_ckpt.exists():
        raise ValidationError(f"base checkpoint not found at {base_ckpt}; run pretrain-base")
    comp = build_components(cfg, trainable_denoiser=False)
    comp.denoiser.load_state_dict(checkpoint.load_arrays(base_ckpt))
    rows = [r for r in read_manifest(manifest) if r.split == "train" and r.is_anomalous]
    items = load_train_items(manifest, rows, comp.text_encoder, comp.latent_spec,
                             vlm=comp.vlm, dtype=comp.denoiser.config.np_dtype)
    comp.adapter.set_trainable(True)
    den_hash = comp.denoiser.params_hash()
    vlm_hash = comp.vlm.params_hash()
    settings = TrainSettings(steps=cfg.adapter_steps, batch_size=cfg.batch_size,
                             seed=cfg.seed, guidance_steps=cfg.guidance_steps,
                             guidance_lr=cfg.guidance_lr)
    logs = train_adapter(items, comp.denoiser, comp.vlm, comp.adapter, comp.schedule,
                         settings, p_drop=cfg.dropout_p, lr=cfg.adapter_lr,
                         weight_decay=cfg.weight_decay)
    if comp.denoiser.params_hash() != den_hash or comp.vlm.params_hash() != vlm_hash:
        raise FrozenParameterError("frozen parameters changed during adapter training")
    ckpt = Path(out_dir) / cfg.adapter_ckpt
    checkpoint.save_arrays(ckpt, comp.adapter.state_dict())
    write_log(Path(out_dir) / "adapter_log.tsv", logs)
    return ckpt, logs


def load_trained(cfg: RunConfig, out_dir: str | Path,
                 need_adapter: bool = True) -> Components:
    comp = build_components(cfg, trainable_denoiser=False)
    base_ckpt = Path(out_dir) / cfg.base_ckpt
    if not base_ckpt.exists():
        raise ValidationError(f"base checkpoint not found at {base_ckpt}")
    comp.denoiser.load_state_dict(checkpoint.load_arrays(base_ckpt))
    adapter_ckpt = Path(out_dir) / cfg.adapter_ckpt
    if adapter_ckpt.exists():
        comp.adapter.load_state_dict(checkpoint.load_arrays(adapter_ckpt))
    elif need_adapter and cfg.gamma != 0.0:
        raise ValidationError(
            f"adapter checkpoint missing at {adapter_ckpt} but gamma={cfg.gamma} > 0"
        )
    return comp


def cmd_sample(cfg: RunConfig, out_dir: str | Path, count: int = 8,
               per_row: int = 1, split: str = "train",
               base_only: bool = False) -> Path:
    manifest = _manifest_path(cfg, out_dir)
    rows = read_manifest(manifest)
    by_id = {r.id: r for r in rows}
    pool = [r for r in rows if r.split == split and r.is_anomalous]
    if not pool:
        raise ValidationError(f"no anomalous rows in split {split!r}")
    comp = load_trained(cfg, out_dir, need_adapter=not base_only)
    sampler = make_sampler(comp, use_asea=cfg.guidance_steps > 0,
                           with_adapter=not base_only)
    sample_dir = Path(out_dir) / cfg.sample_dir
    sample_dir.mkdir(parents=True, exist_ok=True)
    log_lines = ["index\trow_id\tseed\tE_0\tE_Tg\timage\tmask"]
    images = []
    for i in range(count):
        row = pool[(i // per_row) % len(pool)]
        pair = prompt_pair_for_row(manifest, by_id, row)
        seed = cfg.seed * 100003 + i
        img, info = sampler.sample(pair.target_tokens, pair, seed=seed)
        img_rel = f"sample_{i:04d}.png"
        mask_rel = f"sample_{i:04d}_mask.png"
        imageio.save_image(sample_dir / img_rel, img)
        imageio.save_mask(sample_dir / mask_rel, pair.anomaly_mask)
        e0 = info.energies[0] if info.energies else float("nan")
        etg = info.energies[-1] if info.energies else float("nan")
        log_lines.append(
            f"{i}\t{row.id}\t{seed}\t{e0:.6f}\t{etg:.6f}\t{img_rel}\t{mask_rel}"
        )
        images.append(img)
    imageio.save_contact_sheet(sample_dir / "contact_sheet.png", images)
    (sample_dir / "samples_log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return sample_dir


def new_report(cfg: RunConfig) -> MetricReport:
    return MetricReport(config_hash=config_hash_of(serialize_config(cfg)))
