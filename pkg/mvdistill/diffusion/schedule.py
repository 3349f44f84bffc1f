"""
mvdistill: Noise Schedule

Discrete linear-beta DDPM schedule with alpha_bar[0] = 1, so t = 0 denotes the
noise-free latent, and the closed-form forward process.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import torch

from mvdistill.core.config import ScheduleConfig
from mvdistill.core.errors import ContractViolation, ScheduleError

Step = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: torch.Tensor  # [T + 1], float64

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.numel() < 2:
            raise ScheduleError("alpha_bar must be a 1-D table with at least two entries")
        if ab[0].item() != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1 (t = 0 is noise-free)")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if ab[-1].item() <= 0.0:
            raise ScheduleError("alpha_bar[T] must stay positive")

    @property
    def T(self) -> int:
        return self.alpha_bar.numel() - 1

    def at(self, t: Step, like: torch.Tensor | None = None) -> torch.Tensor:
        index = torch.as_tensor(t, dtype=torch.long)
        values = self.alpha_bar[index]
        if like is not None:
            values = values.to(dtype=like.dtype, device=like.device)
        return values

    def window(self, fraction: Tuple[float, float]) -> Tuple[int, int]:
        """Map a (t_min, t_max) fraction window to inclusive integer steps in [1, T]."""
        low = max(1, int(round(fraction[0] * self.T)))
        high = min(self.T, max(low, int(round(fraction[1] * self.T))))
        return low, high

    def to_dict(self) -> dict:
        return {"alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(alpha_bar=torch.tensor(data["alpha_bar"], dtype=torch.float64))


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be positive, got {T}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ScheduleError(
            f"require 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})",
            {"beta_min": beta_min, "beta_max": beta_max},
        )
    betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(alpha_bar=alpha_bar)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(config.T, config.beta_min, config.beta_max)


def _broadcast(values: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return values.reshape(*values.shape, *([1] * (target.dim() - values.dim())))


def forward_diffuse(z: torch.Tensor, t: Step, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """
    sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps.

    `t` is a scalar or a tensor matching the leading dims of `z` (e.g. [B, V]
    for latents [B, V, C, h, w]). At t = 0 this returns `z` exactly.
    """
    if eps.shape != z.shape:
        raise ContractViolation(
            f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(z.shape)}",
            component="diffusion",
        )
    steps = torch.as_tensor(t, dtype=torch.long)
    if bool((steps < 0).any()) or bool((steps > schedule.T).any()):
        raise ContractViolation(f"timestep out of range [0, {schedule.T}]", {"t": steps.tolist()}, component="diffusion")
    a = _broadcast(schedule.at(steps, like=z), z)
    return a.sqrt() * z + (1.0 - a).sqrt() * eps
