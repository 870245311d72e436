"""Experiment drivers: concentration, diversity, localization, downstream."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import LatentSpec, downsample_mask, encode
from .dataset import ManifestRow, load_row_image, load_row_mask, prompt_pair_for_row, read_manifest
from .errors import ValidationError
from .guidance import optimize_guidance
from .metrics import MetricReport, concentration_ratio, diversity_proxy, localization_ratio
from .pipeline import Components, make_sampler, new_report
from .protocol import LabeledImage, crop_paste_pairs, downstream_protocol
from .sampling import Sampler
from .segmenter import SegmenterConfig
from .vocab import strip_position, targeted_caption, tokenize


def anomalous_rows(manifest: Path, split: str) -> list[ManifestRow]:
    rows = read_manifest(manifest)
    out = [r for r in rows if r.split == split and r.is_anomalous]
    if not out:
        raise ValidationError(f"no anomalous rows in split {split!r}")
    return out


def _texture_of(row: ManifestRow) -> str:
    return row.target_text.split()[0]


def concentration_stats(comp: Components, manifest: Path, count: int,
                        steps: int | None = None) -> tuple[float, float]:
    """Mean in-mask attention fraction before and after guidance."""
    rows = anomalous_rows(manifest, "train")
    by_id = {r.id: r for r in read_manifest(manifest)}
    cfg = comp.config
    n_steps = cfg.guidance_steps if steps is None else steps
    before, after = [], []
    patch_spec = LatentSpec(comp.vlm.config.patch)
    for i in range(count):
        row = rows[i % len(rows)]
        pair = prompt_pair_for_row(manifest, by_id, row)
        e_t, e_v = comp.vlm.embed_inputs(pair.reference_image, pair.reference_tokens)
        pm = downsample_mask(pair.anomaly_mask, patch_spec).reshape(-1)
        res = optimize_guidance(e_t, e_v, pair.token_span, pm, comp.vlm,
                                step_size=cfg.guidance_lr, steps=n_steps)
        before.append(1.0 - np.sqrt(res.energies[0]))
        after.append(1.0 - np.sqrt(res.energies[-1]))
    return float(np.mean(before)), float(np.mean(after))


def localization_experiment(comp: Components, sampler: Sampler, manifest: Path,
                            count: int, seed0: int = 0) -> list[float]:
    """Sample anomalies and measure how much of the change against a
    defect-free same-seed generation lands inside the requested mask.

    Captions are stripped of location clauses here: the placement signal
    under test is the cross-modal one.
    """
    rows = anomalous_rows(manifest, "train")
    by_id = {r.id: r for r in read_manifest(manifest)}
    ratios = []
    for i in range(count):
        row = rows[i % len(rows)]
        pair = prompt_pair_for_row(manifest, by_id, row)
        target_tokens = tokenize(strip_position(row.target_text))
        seed = seed0 + i
        gen, _ = sampler.sample(target_tokens, pair, seed=seed)
        normal_tokens = targeted_caption(_texture_of(row), None)
        base, _ = sampler.sample(normal_tokens, None, seed=seed)
        res = localization_ratio(gen, base, pair.anomaly_mask)
        ratios.append(res.ratio)
    return ratios


def synthesize_set(sampler: Sampler, manifest: Path, count: int,
                   seed0: int = 10_000) -> list[LabeledImage]:
    """Generated (image, conditioning-mask) pairs for downstream training."""
    rows = anomalous_rows(manifest, "train")
    by_id = {r.id: r for r in read_manifest(manifest)}
    out = []
    for i in range(count):
        row = rows[i % len(rows)]
        pair = prompt_pair_for_row(manifest, by_id, row)
        img, _ = sampler.sample(pair.target_tokens, pair, seed=seed0 + i)
        out.append(LabeledImage(image=img, mask=pair.anomaly_mask, source_id=row.id))
    return out


def manifest_labeled(manifest: Path, split: str, anomalous_only: bool = False) -> list[LabeledImage]:
    rows = read_manifest(manifest)
    out = []
    for r in rows:
        if r.split != split:
            continue
        if anomalous_only and not r.is_anomalous:
            continue
        out.append(LabeledImage(image=load_row_image(manifest, r),
                                mask=load_row_mask(manifest, r), source_id=r.id))
    return out


def normal_images(manifest: Path, split: str) -> list[np.ndarray]:
    rows = read_manifest(manifest)
    return [load_row_image(manifest, r) for r in rows
            if r.split == split and not r.is_anomalous]


def denoiser_feature_fn(comp: Components, t_feat: int):
    def fn(image: np.ndarray) -> np.ndarray:
        z0 = encode(image, comp.latent_spec).astype(comp.denoiser.config.np_dtype)
        return comp.denoiser.mid_features(z0[None], t_feat)[0]
    return fn


def run_eval(comp: Components, out_dir: str | Path, n_quick: int = 16,
             downstream: bool = False, downstream_count: int = 500,
             sweep: bool = False, seg_steps: int = 600) -> MetricReport:
    """The eval command body: quick metrics, optional downstream and sweep."""
    cfg = comp.config
    manifest = Path(out_dir) / cfg.data_dir / "manifest.tsv"
    report = new_report(cfg)

    r0, r1 = concentration_stats(comp, manifest, count=n_quick)
    report.add("concentration.base", r0, count=n_quick, seed=cfg.seed)
    report.add("concentration.guided", r1, count=n_quick, seed=cfg.seed)

    sampler = make_sampler(comp, use_asea=cfg.guidance_steps > 0)
    ratios = localization_experiment(comp, sampler, manifest, count=n_quick, seed0=cfg.seed)
    report.add("localization.mean", float(np.mean(ratios)), count=n_quick, seed=cfg.seed)

    control = make_sampler(comp, use_asea=False)
    ratios_c = localization_experiment(comp, control, manifest, count=n_quick, seed0=cfg.seed)
    report.add("localization.no_asea", float(np.mean(ratios_c)), count=n_quick, seed=cfg.seed)

    rows = anomalous_rows(manifest, "train")
    by_id = {r.id: r for r in read_manifest(manifest)}
    pair = prompt_pair_for_row(manifest, by_id, rows[0])
    imgs = [sampler.sample(pair.target_tokens, pair, seed=cfg.seed + 500 + k)[0]
            for k in range(6)]
    fn = denoiser_feature_fn(comp, min(cfg.feature_t, comp.schedule.T // 2))
    report.add("diversity.proxy", diversity_proxy(imgs, fn), count=len(imgs), seed=cfg.seed)

    if downstream:
        synth = synthesize_set(sampler, manifest, downstream_count)
        test_set = manifest_labeled(manifest, "test")
        normals = normal_images(manifest, "train")
        downstream_protocol(synth, normals, test_set, seed=cfg.seed,
                            seg_config=SegmenterConfig(seed=cfg.seed, dtype=cfg.dtype),
                            steps=seg_steps, report=report, prefix="downstream.")
        real = manifest_labeled(manifest, "train", anomalous_only=True)
        paste = crop_paste_pairs(real, normals, count=downstream_count, seed=cfg.seed)
        downstream_protocol(paste, normals, test_set, seed=cfg.seed,
                            seg_config=SegmenterConfig(seed=cfg.seed, dtype=cfg.dtype),
                            steps=seg_steps, report=report, prefix="crop_paste.")

    if sweep:
        for tg in (0, 1, 2, 3, 4, 5):
            _, r_g = concentration_stats(comp, manifest, count=n_quick, steps=tg)
            report.add(f"sweep.tg{tg}.concentration", r_g, count=n_quick, seed=cfg.seed)
        for gamma in (0.0, 1.0):
            saved = comp.adapter.gamma
            comp.adapter.gamma = gamma
            s = make_sampler(comp, use_asea=cfg.guidance_steps > 0)
            r = localization_experiment(comp, s, manifest, count=max(4, n_quick // 2),
                                        seed0=cfg.seed + 900)
            report.add(f"sweep.gamma{gamma:g}.localization", float(np.mean(r)),
                       count=len(r), seed=cfg.seed)
            comp.adapter.gamma = saved

    eval_dir = Path(out_dir) / cfg.eval_dir
    eval_dir.mkdir(parents=True, exist_ok=True)
    report.write(eval_dir / "report")
    return report
