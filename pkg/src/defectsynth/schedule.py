"""Noise schedule, forward diffusion, deterministic DDIM update, CFG mix.

Linear beta schedule; alpha_bar[0] = 1 by convention so t = 0 denotes the
clean sample. The DDIM plan is a strictly decreasing subsequence of 1..T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray        # [T+1]; betas[0] unused
    alphas: np.ndarray       # [T+1]; alphas[0] = 1
    alpha_bars: np.ndarray   # [T+1]; alpha_bars[0] = 1
    ddim_plan: tuple[int, ...]

    def ddim_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs ending at t_prev = 0."""
        ts = list(self.ddim_plan)
        return list(zip(ts, ts[1:] + [0]))


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02,
                  ddim_count: int = 30) -> DiffusionSchedule:
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValidationError(f"need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]")
    if not (1 <= ddim_count <= T):
        raise ValidationError(f"need 1 <= ddim_count <= T, got ddim_count={ddim_count}, T={T}")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T)
    alphas = 1.0 - betas
    alphas[0] = 1.0
    alpha_bars = np.cumprod(alphas)
    # evenly spaced indices rounded to ints; spacing >= 1 keeps them strict
    idx = np.round(np.linspace(0, T - 1, ddim_count)).astype(int)
    plan = tuple(int(t) for t in (idx + 1)[::-1])
    if any(a <= b for a, b in zip(plan, plan[1:])):
        raise ValidationError("ddim plan is not strictly decreasing")
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas,
                             alpha_bars=alpha_bars, ddim_plan=plan)


def _check_t(t: int, schedule: DiffusionSchedule) -> int:
    t = int(t)
    if not (1 <= t <= schedule.T):
        raise IndexError(f"timestep {t} outside 1..{schedule.T}")
    return t


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising sqrt(ab_t) z0 + sqrt(1-ab_t) eps.

    t may be an int (single latent) or an int array matching a batched z0.
    """
    if np.shape(eps) != np.shape(z0):
        raise ValidationError(f"eps shape {np.shape(eps)} != z0 shape {np.shape(z0)}")
    tv = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(tv < 1) or np.any(tv > schedule.T):
        raise IndexError(f"timestep(s) {t} outside 1..{schedule.T}")
    ab = schedule.alpha_bars[tv]
    if np.ndim(t) == 0:
        ab = ab[0]
    else:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    dt = z0.dtype
    return np.sqrt(ab).astype(dt) * z0 + np.sqrt(1.0 - ab).astype(dt) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + scale * (eps_c - eps_u)."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValidationError("cfg_combine operands must share a shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: DiffusionSchedule, clamp_z0: bool = False) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_prev."""
    t = _check_t(t, schedule)
    if not (0 <= t_prev < t):
        raise ContractError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bars[t]
    ab_p = schedule.alpha_bars[t_prev]
    dt = z_t.dtype
    z0_hat = (z_t - np.sqrt(1.0 - ab_t).astype(dt) * eps_hat) / np.sqrt(ab_t).astype(dt)
    if clamp_z0:
        z0_hat = np.clip(z0_hat, -3.0, 3.0)
    return np.sqrt(ab_p).astype(dt) * z0_hat + np.sqrt(1.0 - ab_p).astype(dt) * eps_hat
