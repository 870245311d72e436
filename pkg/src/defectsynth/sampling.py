"""Deterministic DDIM sampling with classifier-free guidance.

The default guidance contrasts the jointly-conditioned prediction with a
fully-unconditioned one at a single scale; per-condition guidance (text
and cross-modal scales applied separately) is available as an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import Adapter
from .codec import LatentSpec, decode, downsample_mask
from .dataset import PromptPair
from .errors import ValidationError
from .fusion import CrossModalEncoder, cross_modal_feature
from .guidance import optimize_guidance
from .schedule import DiffusionSchedule, cfg_combine, ddim_step
from .seeding import stream_seed
from .text_encoder import TextEncoder
from .unet import Denoiser

GUIDANCE_MODES = ("joint", "per_condition")


@dataclass
class SampleInfo:
    seed: int
    energies: tuple[float, ...] | None   # guidance trace, None if no refinement ran
    z0: np.ndarray | None = None


@dataclass
class Sampler:
    denoiser: Denoiser
    text_encoder: TextEncoder
    schedule: DiffusionSchedule
    latent_spec: LatentSpec
    vlm: CrossModalEncoder | None = None
    adapter: Adapter | None = None
    guidance_scale: float = 7.5
    guidance_mode: str = "joint"
    text_scale: float = 7.5
    cm_scale: float = 7.5
    asea_steps: int = 3
    asea_lr: float = 0.1
    use_asea: bool = True
    clamp_z0: bool = False

    def __post_init__(self):
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValidationError(
                f"guidance_mode must be one of {GUIDANCE_MODES}, got {self.guidance_mode!r}"
            )
        if self.adapter is None and self.vlm is not None:
            raise ValidationError("cross-modal conditioning needs an adapter")

    # -- conditioning -------------------------------------------------------

    def _cross_modal(self, pair: PromptPair | None) -> tuple[np.ndarray | None, tuple | None]:
        if pair is None or self.vlm is None or self.adapter is None:
            return None, None
        e_t, e_v = self.vlm.embed_inputs(pair.reference_image, pair.reference_tokens)
        energies = None
        e_g = None
        if self.use_asea and pair.anomaly_mask.any():
            patch_spec = LatentSpec(self.vlm.config.patch)
            patch_mask = downsample_mask(pair.anomaly_mask, patch_spec).reshape(-1)
            res = optimize_guidance(e_t, e_v, pair.token_span, patch_mask, self.vlm,
                                    step_size=self.asea_lr, steps=self.asea_steps)
            e_g = res.e_g
            energies = res.energies
        feat = cross_modal_feature(e_t, e_v, e_g, self.vlm)
        return feat.astype(self.denoiser.config.np_dtype), energies

    # -- core loop ------------------------------------------------------------

    def _predict(self, z: np.ndarray, t: int, cond: np.ndarray,
                 cm: np.ndarray | None) -> np.ndarray:
        dt = self.denoiser.config.np_dtype
        zero_c = np.zeros_like(cond)
        if self.guidance_mode == "joint":
            stack = np.stack([z, z])
            conds = np.stack([cond, zero_c])
            cms = None if cm is None else np.stack([cm, np.zeros_like(cm)])
            eps = self.denoiser.forward(stack.astype(dt), np.array([t, t]), conds, cms,
                                        self.adapter).data
            return cfg_combine(eps[0], eps[1], self.guidance_scale)
        stack = np.stack([z, z, z])
        conds = np.stack([cond, cond, zero_c])
        cm0 = np.zeros_like(cm) if cm is not None else None
        cms = None if cm is None else np.stack([cm, cm0, cm0])
        eps = self.denoiser.forward(stack.astype(dt), np.array([t, t, t]), conds, cms,
                                    self.adapter).data
        txt = cfg_combine(eps[1], eps[2], self.text_scale)
        return txt + self.cm_scale * (eps[0] - eps[1])

    def sample_latent(self, cond: np.ndarray, cm: np.ndarray | None,
                      z_init: np.ndarray) -> np.ndarray:
        z = z_init
        for t, t_prev in self.schedule.ddim_pairs():
            eps_hat = self._predict(z, t, cond, cm)
            z = ddim_step(z, eps_hat, t, t_prev, self.schedule, clamp_z0=self.clamp_z0)
        return z

    def sample(self, target_tokens, pair: PromptPair | None = None,
               seed: int = 0) -> tuple[np.ndarray, SampleInfo]:
        """One image for a targeted caption and optional reference pair."""
        c = self.denoiser.config
        dt = c.np_dtype
        cond = self.text_encoder.encode(target_tokens).astype(dt)
        cm, energies = self._cross_modal(pair)
        rng = stream_seed(seed, "sampler")
        z = rng.standard_normal((c.latent_size, c.latent_size, c.latent_channels)).astype(dt)
        z0 = self.sample_latent(cond, cm, z)
        image = decode(z0.astype(np.float64), self.latent_spec)
        return image, SampleInfo(seed=seed, energies=energies, z0=z0)
