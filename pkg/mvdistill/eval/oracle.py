"""
mvdistill: Oracle Denoiser

The exact optimal noise predictor for point targets z*: given z_t it returns
(z_t - sqrt(ab_t) z*) / sqrt(1 - ab_t). It ignores every condition, so
classifier-free guidance collapses onto it for any scale. Driving SDS with it
makes convergence toward z* a closed-form fact, which isolates renderer and
SDS plumbing bugs.
"""

from __future__ import annotations

from typing import Optional

import torch

from mvdistill.core.errors import ContractViolation
from mvdistill.diffusion.schedule import NoiseSchedule


def oracle_predict(targets: torch.Tensor, z_t: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.long)
    if bool((steps < 1).any()) or bool((steps > schedule.T).any()):
        raise ContractViolation(
            "the oracle is undefined outside 1 <= t <= T (t = 0 divides by zero)",
            {"t": steps.tolist()},
            component="oracle",
        )
    a = schedule.at(steps, like=z_t)
    a = a.reshape(*a.shape, *([1] * (z_t.dim() - a.dim())))
    return (z_t - a.sqrt() * targets.to(z_t.dtype)) / (1.0 - a).sqrt()


class OracleDenoiser:
    """Per-slot targets [V, C, h, w]; callable with the denoiser convention."""

    def __init__(self, targets: torch.Tensor, schedule: NoiseSchedule):
        self.targets = targets
        self.schedule = schedule

    def __call__(
        self,
        latents: torch.Tensor,
        timesteps: torch.Tensor,
        poses: torch.Tensor,
        embedding: torch.Tensor,
        drop_condition: Optional[torch.Tensor] = None,
        is_reference: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if is_reference is not None and bool(is_reference.any()):
            raise ContractViolation("the oracle models target slots only", component="oracle")
        if latents.shape[1:] != self.targets.shape:
            raise ContractViolation(
                "latent slots do not match the oracle targets",
                {"latents": list(latents.shape), "targets": list(self.targets.shape)},
                component="oracle",
            )
        return oracle_predict(self.targets.unsqueeze(0), latents, timesteps, self.schedule)
