"""Flat key=value run configuration.

Every field has a default; parsing an emitted config reproduces it byte
for byte (canonical form: sorted keys, '#' comments allowed on input).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class RunConfig:
    # global
    seed: int = 0
    threads: int = 1
    dtype: str = "float32"
    image_size: int = 32
    latent_factor: int = 2
    # dataset
    textures: str = "stripes,checker,noise,cellular"
    defects: str = "scratch,spot,crack,contamination"
    n_normal: int = 48
    n_anomalous: int = 96
    train_fraction: float = 1.0 / 3.0
    reference_pairing: str = "same_type_random"
    delta_min: float = 0.25
    delta_max: float = 0.5
    # schedule
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    ddim_count: int = 30
    # model widths
    base_width: int = 32
    text_width: int = 32
    cm_width: int = 32
    temb_dim: int = 32
    vlm_width: int = 32
    vlm_heads: int = 2
    vlm_patch: int = 4
    max_tokens: int = 8
    # attention guidance
    guidance_steps: int = 3
    guidance_lr: float = 0.1
    persist_guidance: bool = False
    # adapter training
    gamma: float = 1.0
    adapter_lr: float = 1e-4
    weight_decay: float = 0.01
    dropout_p: float = 0.05
    adapter_steps: int = 600
    # base training
    base_lr: float = 2e-3
    base_steps: int = 1200
    base_dropout: float = 0.1
    batch_size: int = 8
    # sampling
    guidance_scale: float = 7.5
    guidance_mode: str = "joint"
    text_scale: float = 7.5
    cm_scale: float = 7.5
    clamp_z0: bool = False
    feature_t: int = 500
    # relative paths under the run directory
    data_dir: str = "data"
    base_ckpt: str = "base.ckpt"
    adapter_ckpt: str = "adapter.ckpt"
    sample_dir: str = "samples"
    eval_dir: str = "eval"

    def texture_list(self) -> tuple[str, ...]:
        return tuple(s for s in self.textures.split(",") if s)

    def defect_list(self) -> tuple[str, ...]:
        return tuple(s for s in self.defects.split(",") if s)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{name}={_format_value(getattr(cfg, name))}" for name in sorted(_FIELDS)]
    return "\n".join(lines) + "\n"


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name]
    if kind in (bool, "bool"):
        if raw not in ("true", "false"):
            raise ValidationError(f"{name}: expected true/false, got {raw!r}")
        return raw == "true"
    if kind in (int, "int"):
        try:
            return int(raw)
        except ValueError as e:
            raise ValidationError(f"{name}: expected int, got {raw!r}") from e
    if kind in (float, "float"):
        try:
            return float(raw)
        except ValueError as e:
            raise ValidationError(f"{name}: expected float, got {raw!r}") from e
    return raw


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw.strip()))
    return cfg


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8")) if path else RunConfig()
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ValidationError(f"unknown config override {key!r}")
        setattr(cfg, key, value)
    return cfg
