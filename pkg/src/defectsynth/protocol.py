"""Downstream evaluation protocol and the crop-paste control.

A fresh segmentation net is trained on synthesized (image, mask) pairs
plus normal images, then scored on the held-out procedural test split:
pixel AUROC over every test pixel and image AUROC with the image score
taken as the maximum pixel score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ValidationError
from .metrics import MetricReport, auroc
from .segmenter import SegmenterConfig, train_segmenter
from .seeding import stream_seed


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray          # [H,W,3]
    mask: np.ndarray           # [H,W] {0,1}
    source_id: int             # manifest row id (or -1 for synthetic)


def crop_paste_pairs(anomalous: list[LabeledImage], normals: list[np.ndarray],
                     count: int, seed: int) -> list[LabeledImage]:
    """Cut-paste augmentation control: paste the bounding-box crop of a real
    defect onto a normal image at a random position. The pasted rectangle
    drags source background along, which is exactly this baseline's known
    weakness."""
    if not anomalous or not normals:
        raise ValidationError("crop-paste needs anomalous and normal sources")
    rng = stream_seed(seed, "crop_paste")
    out: list[LabeledImage] = []
    size = normals[0].shape[0]
    for _ in range(count):
        src = anomalous[int(rng.integers(0, len(anomalous)))]
        base = normals[int(rng.integers(0, len(normals)))].copy()
        ys, xs = np.nonzero(src.mask)
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        bh, bw = y1 - y0, x1 - x0
        ty = int(rng.integers(0, size - bh + 1))
        tx = int(rng.integers(0, size - bw + 1))
        base[ty:ty + bh, tx:tx + bw] = src.image[y0:y1, x0:x1]
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[ty:ty + bh, tx:tx + bw] = src.mask[y0:y1, x0:x1]
        out.append(LabeledImage(image=base, mask=mask, source_id=-1))
    return out


def downstream_protocol(train_pairs: list[LabeledImage], normal_images: list[np.ndarray],
                        test_set: list[LabeledImage], seed: int,
                        seg_config: SegmenterConfig | None = None,
                        steps: int = 600, allow_overlap: bool = False,
                        report: MetricReport | None = None,
                        prefix: str = "") -> MetricReport:
    """Train a segmenter on train_pairs + normals, report pixel/image AUROC.

    allow_overlap=True is the sanity-violation mode used to demonstrate
    that training on the test set itself is detected as overfit.
    """
    if not test_set:
        raise ProtocolError("empty test set")
    train_ids = {p.source_id for p in train_pairs if p.source_id >= 0}
    test_ids = {p.source_id for p in test_set if p.source_id >= 0}
    overlap = train_ids & test_ids
    if overlap and not allow_overlap:
        raise ProtocolError(f"train/test manifests overlap on ids {sorted(overlap)[:5]}")

    pairs = [(p.image, p.mask) for p in train_pairs]
    zero = np.zeros(test_set[0].mask.shape, dtype=np.uint8)
    pairs += [(img, zero) for img in normal_images]
    cfg = seg_config or SegmenterConfig(seed=seed)
    seg = train_segmenter(pairs, cfg, steps=steps, seed=seed)

    scores = seg.predict(np.stack([p.image for p in test_set]))
    pixel_labels = np.stack([p.mask for p in test_set]).reshape(-1)
    pixel_auroc = auroc(scores.reshape(-1), pixel_labels)
    image_scores = scores.reshape(len(test_set), -1).max(axis=1)
    image_labels = np.array([int(p.mask.any()) for p in test_set])
    image_auroc = auroc(image_scores, image_labels)

    rep = report or MetricReport()
    key = f"{prefix}pixel_auroc" if prefix else "pixel_auroc"
    rep.add(key, pixel_auroc, count=len(test_set), seed=seed)
    key_i = f"{prefix}image_auroc" if prefix else "image_auroc"
    rep.add(key_i, image_auroc, count=len(test_set), seed=seed)
    return rep
