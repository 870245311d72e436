"""Finite-difference verification suites (double precision).

Two suites: the guidance-energy gradient through the frozen cross-modal
stack, and the adapter-parameter gradients of the conditioned training
objective. Both compare reverse-mode gradients against central
differences on seeded random configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .adapter import Adapter, AdapterConfig
from .codec import LatentSpec, downsample_mask
from .defects import inject_defect, random_spec
from .fusion import CrossModalEncoder, FusionConfig, attention_map
from .guidance import energy, mean_anomaly_attention
from .optim import AdamW
from .tensor import Tape, Tensor, finite_diff_grad, rel_error_norm
from .textures import gen_normal
from .unet import Denoiser, DenoiserConfig
from .vocab import DEFECT_KINDS, TEXTURE_KINDS, reference_caption


@dataclass
class GradCheckResult:
    name: str
    worst: float
    tolerance: float
    configs: int

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status} {self.name}: worst rel err {self.worst:.3e} "
                f"(tol {self.tolerance:.0e}, {self.configs} configs)")


def _guidance_case(seed: int, size: int = 32):
    rng = np.random.default_rng(seed)
    kind = DEFECT_KINDS[seed % len(DEFECT_KINDS)]
    tex = TEXTURE_KINDS[(seed // len(DEFECT_KINDS)) % len(TEXTURE_KINDS)]
    img = gen_normal(tex, seed, size)
    ref, mask = inject_defect(img, random_spec(kind, size, rng))
    pm = downsample_mask(mask, LatentSpec(4)).reshape(-1)
    ids, span = reference_caption(kind)
    return ref, ids, span, pm


def check_guidance_gradients(configs: int = 20, tol: float = 1e-5,
                             seed: int = 0) -> GradCheckResult:
    """dE/de_g through both cross-attention blocks vs central differences."""
    vlm = CrossModalEncoder(FusionConfig(seed=seed, dtype="float64"))
    worst = 0.0
    for s in range(configs):
        ref, ids, span, pm = _guidance_case(s)
        e_t, e_v = vlm.embed_inputs(ref, ids)
        e_g0 = np.random.default_rng(1000 + s).standard_normal(e_v.shape) * 0.02

        def objective(g):
            att = attention_map(e_t, e_v, g, vlm)
            return energy(mean_anomaly_attention(att, span), pm)

        leaf = Tensor(e_g0, requires_grad=True)
        with Tape() as tape:
            tape.backward(objective(leaf))
        fd = finite_diff_grad(objective, leaf, h=1e-6)
        worst = max(worst, rel_error_norm(leaf.grad, fd))
    return GradCheckResult("guidance energy dE/de_g", worst, tol, configs)


def check_adapter_gradients(configs: int = 20, tol: float = 1e-4,
                            seed: int = 0) -> GradCheckResult:
    """Adapter-parameter gradients of the conditioned noise-regression loss."""
    den_cfg = DenoiserConfig(latent_size=4, latent_channels=12, width=8,
                             text_width=8, temb_dim=8, T=50, seed=seed,
                             dtype="float64")
    worst = 0.0
    for s in range(configs):
        rng = np.random.default_rng(2000 + s)
        denoiser = Denoiser(den_cfg, trainable=False)
        sd = denoiser.state_dict()
        sd["head.w"] = rng.standard_normal(sd["head.w"].shape) * 0.05
        denoiser.load_state_dict(sd)
        adapter = Adapter(AdapterConfig(cm_width=8, feat_len=4,
                                        widths=den_cfg.attn_widths, seed=s,
                                        dtype="float64"))
        # nonzero W_v' so the W_k' gradient has signal too
        for name, p in adapter.params.items():
            if name.endswith(".wv"):
                p.data = rng.standard_normal(p.data.shape) * 0.05
        z = rng.standard_normal((2, 4, 4, 12))
        eps = rng.standard_normal(z.shape)
        cond = rng.standard_normal((2, 4, 8)) * 0.5
        cm = rng.standard_normal((2, 4, 8)) * 0.5
        ts = np.array([7, 31])

        for pname in ("block0.wv", "block1.wk"):
            param = adapter.params[pname]

            def objective(w):
                saved = adapter.params[pname]
                adapter.params[pname] = w if isinstance(w, Tensor) else Tensor(w)
                try:
                    pred = denoiser.forward(z, ts, cond, cm, adapter)
                    return tt.tmean(tt.square(tt.sub(pred, Tensor(eps))))
                finally:
                    adapter.params[pname] = saved

            param.zero_grad()
            with Tape() as tape:
                tape.backward(objective(param))
            fd = finite_diff_grad(objective, param, h=1e-6)
            worst = max(worst, rel_error_norm(param.grad, fd))
    return GradCheckResult("adapter parameter gradients", worst, tol, configs)


def check_primitive_gradients(configs: int = 20, tol: float = 1e-5,
                              seed: int = 0) -> GradCheckResult:
    """Composite chain over every differentiable primitive."""
    worst = 0.0
    for s in range(configs):
        rng = np.random.default_rng(3000 + seed + s)
        x0 = rng.standard_normal((3, 4))
        w = Tensor(rng.standard_normal((4, 4)))
        g = Tensor(rng.standard_normal(4))
        b = Tensor(rng.standard_normal(4))
        mask = (rng.random((3, 4)) > 0.5).astype(np.float64)

        def objective(x):
            h = tt.gelu(tt.matmul(x, w))
            h = tt.layer_norm(h, g, b)
            p = tt.softmax_rows(h)
            return tt.add(tt.masked_sum(tt.square(p), mask),
                          tt.tmean(tt.square(tt.sub(p, 0.1))))

        leaf = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            tape.backward(objective(leaf))
        fd = finite_diff_grad(objective, leaf, h=1e-6)
        worst = max(worst, rel_error_norm(leaf.grad, fd))
    return GradCheckResult("primitive op chain", worst, tol, configs)


def run_all(configs: int = 20, seed: int = 0) -> list[GradCheckResult]:
    return [
        check_primitive_gradients(configs, seed=seed),
        check_guidance_gradients(configs, seed=seed),
        check_adapter_gradients(configs, seed=seed),
    ]
