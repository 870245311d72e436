"""Energy-guided refinement of the visual guidance offset.

A per-sample offset e_g (zero at the start of every outer iteration) is
pushed by a few plain gradient-descent steps to concentrate the frozen
stack's attention mass on the masked patches. The energy is the squared
deficit of in-mask attention mass; because attention rows are normalized
it equals (1 - in-mask fraction)^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DivisionGuardError, NumericalError, ValidationError
from .fusion import CrossModalEncoder, attention_map
from .tensor import Tape, Tensor
from .vocab import TokenSpan


def mean_anomaly_attention(att_map: Tensor, span: TokenSpan) -> Tensor:
    """Average the keyword-token rows of an [L,P] attention map -> [P]."""
    if span.total_len > att_map.shape[0]:
        raise ContractError(
            f"span end {span.total_len} exceeds attention rows {att_map.shape[0]}"
        )
    rows = tt.take_rows(att_map, span.rows())
    return tt.tmean(rows, axis=0)


def energy(mean_att: Tensor, patch_mask: np.ndarray) -> Tensor:
    """(1 - in-mask mass / total mass)^2, differentiable in the attention."""
    m = np.asarray(patch_mask).reshape(-1)
    if m.shape[0] != mean_att.shape[0]:
        raise ContractError(
            f"patch mask size {m.shape[0]} != attention size {mean_att.shape[0]}"
        )
    if np.asarray(mean_att.data).min() < 0:
        raise ValidationError("mean attention must be nonnegative")
    total = tt.tsum(mean_att)
    if float(total.data) <= 0.0:
        raise DivisionGuardError("total attention mass is zero")
    inside = tt.masked_sum(mean_att, (m > 0).astype(mean_att.dtype))
    return tt.square(tt.sub(1.0, tt.div(inside, total)))


@dataclass(frozen=True)
class GuidanceResult:
    e_g: np.ndarray          # final offset [P, width]
    energies: tuple[float, ...]  # length steps+1, energies[0] at e_g = 0


def optimize_guidance(e_t: np.ndarray, e_v: np.ndarray, span: TokenSpan,
                      patch_mask: np.ndarray, vlm: CrossModalEncoder,
                      step_size: float = 0.1, steps: int = 3,
                      init: np.ndarray | None = None) -> GuidanceResult:
    """Run `steps` descent updates e_g <- e_g - step_size * dE/de_g.

    The energy trace includes the initial value, so it has steps+1 entries.
    `init` supports the persistent-offset experiment; by default the offset
    starts at zero every call.
    """
    if steps < 0:
        raise ValidationError(f"guidance steps must be >= 0, got {steps}")
    dt = vlm.config.np_dtype
    e_g = np.zeros_like(np.asarray(e_v, dtype=dt)) if init is None else init.astype(dt).copy()
    energies: list[float] = []
    for g in range(steps):
        leaf = Tensor(e_g, requires_grad=True)
        with Tape() as tape:
            att = attention_map(e_t, e_v, leaf, vlm)
            mean_att = mean_anomaly_attention(att, span)
            e_val = energy(mean_att, patch_mask)
            tape.backward(e_val)
        energies.append(float(e_val.data))
        if leaf.grad is None or not np.isfinite(leaf.grad).all():
            raise NumericalError(f"non-finite guidance gradient at step {g + 1}")
        e_g = e_g - step_size * leaf.grad
    att = attention_map(e_t, e_v, e_g, vlm)
    final = energy(mean_anomaly_attention(att, span), patch_mask)
    energies.append(float(final.data))
    return GuidanceResult(e_g=e_g, energies=tuple(energies))
