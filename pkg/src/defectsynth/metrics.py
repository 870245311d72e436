"""Scalar evaluation metrics and the serializable metric report."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DivisionGuardError, MetricUndefinedError


def auroc(scores, labels) -> float:
    """Rank-based AUROC with average-rank tie handling.

    Equals the probability that a random positive outranks a random
    negative, ties counted half.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricUndefinedError(f"scores {s.shape} and labels {y.shape} differ")
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auroc needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def concentration_ratio(mean_att, patch_mask) -> float:
    """In-mask attention mass fraction; (1 - ratio)^2 is the guidance energy."""
    a = np.asarray(mean_att, dtype=np.float64).reshape(-1)
    m = np.asarray(patch_mask).reshape(-1)
    if a.shape != m.shape:
        raise ContractError(f"attention {a.shape} and mask {m.shape} differ")
    total = a.sum()
    if total <= 0:
        raise DivisionGuardError("total attention mass is zero")
    return float(a[m > 0].sum() / total)


def diversity_proxy(images, feature_fn) -> float:
    """Mean pairwise L2 distance between unit-normalized features.

    A stand-in for perceptual pairwise diversity; uses whatever feature
    map `feature_fn` provides (the pipeline passes the trained denoiser's
    bottleneck activations). Not comparable to perceptual-net metrics.
    """
    imgs = list(images)
    if len(imgs) < 2:
        raise ContractError("diversity proxy needs at least two images")
    feats = np.stack([np.asarray(feature_fn(im), dtype=np.float64).reshape(-1) for im in imgs])
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    n = len(imgs)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.linalg.norm(feats[i] - feats[j]))
    return total / (n * (n - 1) / 2)


@dataclass(frozen=True)
class LocalizationResult:
    ratio: float
    no_change: bool


def localization_ratio(generated, normal_baseline, pixel_mask) -> LocalizationResult:
    """Fraction of |generated - baseline| pixel mass inside the mask."""
    g = np.asarray(generated, dtype=np.float64)
    b = np.asarray(normal_baseline, dtype=np.float64)
    m = np.asarray(pixel_mask) > 0
    if g.shape != b.shape or m.shape != g.shape[:2]:
        raise ContractError(
            f"shape mismatch: generated {g.shape}, baseline {b.shape}, mask {m.shape}"
        )
    diff = np.abs(g - b).sum(axis=-1)
    total = diff.sum()
    if total == 0.0:
        return LocalizationResult(ratio=0.0, no_change=True)
    return LocalizationResult(ratio=float(diff[m].sum() / total), no_change=False)


@dataclass
class MetricReport:
    """Named scalar metrics with the seeds and counts that produced them."""

    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""

    def add(self, name: str, value: float, count: int | None = None,
            seed: int | None = None) -> None:
        self.metrics[name] = float(value)
        if count is not None:
            self.counts[name] = int(count)
        if seed is not None:
            self.seeds[name] = int(seed)

    def human_text(self) -> str:
        lines = ["metric report", f"config_hash: {self.config_hash}"]
        for name in sorted(self.metrics):
            extra = []
            if name in self.counts:
                extra.append(f"n={self.counts[name]}")
            if name in self.seeds:
                extra.append(f"seed={self.seeds[name]}")
            suffix = f"  ({', '.join(extra)})" if extra else ""
            lines.append(f"{name}: {self.metrics[name]:.6f}{suffix}")
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        lines = ["metric\tvalue\tcount\tseed\tconfig_hash"]
        for name in sorted(self.metrics):
            lines.append("\t".join([
                name,
                f"{self.metrics[name]:.10g}",
                str(self.counts.get(name, "")),
                str(self.seeds.get(name, "")),
                self.config_hash,
            ]))
        return "\n".join(lines) + "\n"

    def write(self, path_prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(path_prefix)
        txt = prefix.with_suffix(".txt")
        tsv = prefix.with_suffix(".tsv")
        txt.write_text(self.human_text(), encoding="utf-8")
        tsv.write_text(self.table_text(), encoding="utf-8")
        return txt, tsv


def config_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
