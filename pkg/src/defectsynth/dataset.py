"""Procedural dataset builder: images, masks, captions, manifest.

Each anomalous sample is rendered twice: once on its own background
texture (the target row) and once, with the identical defect, on a
different texture (its reference twin). Re-pairing across backgrounds
keeps the anomaly identical while the surface differs, so references and
targets only agree on the anomaly, never on the material.

Manifest: UTF-8, tab-separated, one documented header line, columns
(id, split, image_path, mask_path, reference_id, reference_text,
target_text, keyword). Paths are relative to the manifest directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .defects import inject_defect, random_spec
from .errors import ValidationError
from .seeding import stream_seed
from .textures import gen_normal
from .vocab import (
    TokenSpan,
    check_same_anomaly_type,
    detokenize,
    grid_position_phrase,
    reference_caption,
    targeted_caption,
    tokenize,
)

MANIFEST_HEADER = "# defectsynth manifest v1"
MANIFEST_COLUMNS = (
    "id", "split", "image_path", "mask_path", "reference_id",
    "reference_text", "target_text", "keyword",
)

PAIRING_MODES = ("self", "same_type_random")


@dataclass(frozen=True)
class PromptPair:
    """One conditioning example: reference image and caption, anomaly mask,
    targeted caption, and the anomaly keyword id."""

    reference_image: np.ndarray          # [H,W,3] floats in [0,1]
    reference_tokens: np.ndarray         # token ids
    token_span: TokenSpan
    anomaly_mask: np.ndarray             # [H,W] uint8 {0,1}
    target_tokens: np.ndarray            # token ids
    keyword_id: int


def make_prompt_pair(defect_image: np.ndarray, mask: np.ndarray, keyword: str,
                     target_keyword: str, target_texture: str | None = None) -> PromptPair:
    """Assemble a PromptPair; reference and target must name the same anomaly type."""
    check_same_anomaly_type(keyword, target_keyword)
    ref_tokens, span = reference_caption(keyword)
    tgt_tokens = targeted_caption(target_texture, target_keyword)
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if m.shape != defect_image.shape[:2]:
        raise ValidationError(f"mask shape {m.shape} != image shape {defect_image.shape[:2]}")
    if not m.any():
        raise ValidationError("anomalous prompt pair needs a nonempty mask")
    kw_id = int(tokenize(keyword)[0])
    return PromptPair(
        reference_image=np.asarray(defect_image, dtype=np.float64),
        reference_tokens=ref_tokens,
        token_span=span,
        anomaly_mask=m,
        target_tokens=tgt_tokens,
        keyword_id=kw_id,
    )


@dataclass(frozen=True)
class ManifestRow:
    id: int
    split: str
    image_path: str
    mask_path: str
    reference_id: int
    reference_text: str
    target_text: str
    keyword: str

    @property
    def is_anomalous(self) -> bool:
        return bool(self.keyword)


@dataclass(frozen=True)
class DataConfig:
    size: int = 32
    textures: tuple[str, ...] = ("stripes", "checker", "noise", "cellular")
    defects: tuple[str, ...] = ("scratch", "spot", "crack", "contamination")
    n_normal: int = 48
    n_anomalous: int = 96          # target rows; each adds one reference twin
    train_fraction: float = 1.0 / 3.0
    reference_pairing: str = "same_type_random"
    delta_min: float = 0.25
    delta_max: float = 0.5

    def validate(self) -> None:
        if self.n_normal <= 0 or self.n_anomalous <= 0:
            raise ValidationError("sample counts must be positive")
        if not self.textures or not self.defects:
            raise ValidationError("need at least one texture kind and one defect kind")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValidationError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.reference_pairing not in PAIRING_MODES:
            raise ValidationError(
                f"reference_pairing must be one of {PAIRING_MODES}, got {self.reference_pairing!r}"
            )
        if len(self.textures) < 2 and self.reference_pairing == "same_type_random":
            raise ValidationError("same_type_random pairing needs >= 2 texture kinds")


def _split_for(index: int, count: int, fraction: float) -> str:
    # lowest ids go to training
    n_train = int(round(count * fraction))
    return "train" if index < n_train else "test"


def build_dataset(cfg: DataConfig, seed: int, out_dir: str | Path) -> Path:
    """Write images, masks, and the manifest; returns the manifest path.

    Deterministic: the same (cfg, seed) reproduces every byte. Each sample
    derives its own RNG stream from (seed, index), so generation order
    does not matter.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    next_id = 0

    def _emit(split, img, mask, reference_id, ref_text, tgt_text, keyword):
        nonlocal next_id
        rid = next_id
        next_id += 1
        img_rel = f"images/{rid:05d}.png"
        mask_rel = f"masks/{rid:05d}.png"
        imageio.save_image(out / img_rel, img)
        imageio.save_mask(out / mask_rel, mask)
        rows.append(ManifestRow(rid, split, img_rel, mask_rel, reference_id,
                                ref_text, tgt_text, keyword))
        return rid

    size = cfg.size
    zero_mask = np.zeros((size, size), dtype=np.uint8)

    for i in range(cfg.n_normal):
        texture = cfg.textures[i % len(cfg.textures)]
        rng = stream_seed(seed, "data.normal", i)
        img = gen_normal(texture, int(rng.integers(0, 2**31 - 1)), size)
        split = _split_for(i, cfg.n_normal, cfg.train_fraction)
        tgt_text = detokenize(targeted_caption(texture, None))
        _emit(split, img, zero_mask, next_id, "", tgt_text, "")

    for i in range(cfg.n_anomalous):
        rng = stream_seed(seed, "data.anomalous", i)
        texture = cfg.textures[i % len(cfg.textures)]
        others = [t for t in cfg.textures if t != texture]
        ref_texture = others[int(rng.integers(0, len(others)))] if others else texture
        kind = cfg.defects[(i // len(cfg.textures)) % len(cfg.defects)]
        spec = random_spec(kind, size, rng, (cfg.delta_min, cfg.delta_max))

        base = gen_normal(texture, int(rng.integers(0, 2**31 - 1)), size)
        img, mask = inject_defect(base, spec)
        ref_base = gen_normal(ref_texture, int(rng.integers(0, 2**31 - 1)), size)
        ref_img, ref_mask = inject_defect(ref_base, spec)
        assert np.array_equal(mask, ref_mask)

        split = _split_for(i, cfg.n_anomalous, cfg.train_fraction)
        ys, xs = np.nonzero(mask)
        pos = grid_position_phrase(float(ys.mean()), float(xs.mean()), size)
        ref_text = detokenize(reference_caption(kind)[0])
        tgt_text = detokenize(targeted_caption(texture, kind, pos))
        twin_text = detokenize(targeted_caption(ref_texture, kind, pos))

        target_id = next_id
        twin_id = next_id + 1
        paired_ref = target_id if cfg.reference_pairing == "self" else twin_id
        _emit(split, img, mask, paired_ref, ref_text, tgt_text, kind)
        _emit(split, ref_img, ref_mask, target_id if cfg.reference_pairing != "self" else twin_id,
              ref_text, twin_text, kind)

    manifest = out / "manifest.tsv"
    lines = [MANIFEST_HEADER, "\t".join(MANIFEST_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            str(r.id), r.split, r.image_path, r.mask_path, str(r.reference_id),
            r.reference_text, r.target_text, r.keyword,
        ]))
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> list[ManifestRow]:
    text = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
    if not text or text[0] != MANIFEST_HEADER:
        raise ValidationError(f"{path}: missing manifest header line")
    if text[1] != "\t".join(MANIFEST_COLUMNS):
        raise ValidationError(f"{path}: unexpected manifest columns")
    rows = []
    for line in text[2:]:
        f = line.split("\t")
        if len(f) != len(MANIFEST_COLUMNS):
            raise ValidationError(f"{path}: malformed row {line!r}")
        rows.append(ManifestRow(int(f[0]), f[1], f[2], f[3], int(f[4]), f[5], f[6], f[7]))
    return rows


def load_row_image(manifest_path: str | Path, row: ManifestRow) -> np.ndarray:
    return imageio.load_image(Path(manifest_path).parent / row.image_path)


def load_row_mask(manifest_path: str | Path, row: ManifestRow) -> np.ndarray:
    return imageio.load_mask(Path(manifest_path).parent / row.mask_path)


def prompt_pair_for_row(manifest_path: str | Path, rows_by_id: dict[int, ManifestRow],
                        row: ManifestRow) -> PromptPair:
    """Build the training/inference PromptPair for an anomalous manifest row."""
    if not row.is_anomalous:
        raise ValidationError(f"row {row.id} is a normal sample; no prompt pair")
    ref = rows_by_id[row.reference_id]
    ref_img = load_row_image(manifest_path, ref)
    ref_mask = load_row_mask(manifest_path, ref)
    ref_tokens, span = reference_caption(row.keyword)
    assert detokenize(ref_tokens) == row.reference_text
    return PromptPair(
        reference_image=ref_img,
        reference_tokens=ref_tokens,
        token_span=span,
        anomaly_mask=ref_mask,
        target_tokens=tokenize(row.target_text),
        keyword_id=int(tokenize(row.keyword)[0]),
    )
