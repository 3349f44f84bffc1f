"""
mvdistill: Diffusion Losses

Batch bundles for the two training objectives, the plain multi-view
epsilon-MSE, the reference-conditioned (EMA) loss whose reference slot carries
no loss, and classifier-free guidance.

Every model passed here follows one call convention:

    model(latents [B, S, C, h, w], timesteps [B, S], poses [B, S, 3],
          embedding [B, D], drop_condition=None | [B] bool,
          is_reference=None | [S] bool) -> noise predictions [B, S, C, h, w]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import torch
import torch.nn.functional as F

from mvdistill.core.errors import ContractViolation
from mvdistill.diffusion.schedule import NoiseSchedule, forward_diffuse
from mvdistill.geometry.camera import RelativePose


class NoisePredictor(Protocol):
    def __call__(
        self,
        latents: torch.Tensor,
        timesteps: torch.Tensor,
        poses: torch.Tensor,
        embedding: torch.Tensor,
        drop_condition: Optional[torch.Tensor] = None,
        is_reference: Optional[torch.Tensor] = None,
    ) -> torch.Tensor: ...


def poses_to_tensor(poses: Sequence[RelativePose], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[V] RelativePose -> [V, 3] (d_elevation, d_azimuth, distance)."""
    return torch.tensor([p.as_tuple() for p in poses], dtype=dtype).reshape(len(poses), 3)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Batches
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


@dataclass(frozen=True)
class ConditionBundle:
    embedding: torch.Tensor  # [B, D]
    poses: torch.Tensor  # [B, V, 3], one relative pose per target slot

    def __post_init__(self):
        if self.embedding.dim() != 2 or self.poses.dim() != 3 or self.poses.shape[-1] != 3:
            raise ContractViolation(
                "condition expects embedding [B, D] and poses [B, V, 3]",
                {"embedding": list(self.embedding.shape), "poses": list(self.poses.shape)},
                component="diffusion",
            )
        if self.embedding.shape[0] != self.poses.shape[0]:
            raise ContractViolation("embedding and poses disagree on the object count", component="diffusion")

    @classmethod
    def from_poses(cls, embedding: torch.Tensor, poses: Sequence[Sequence[RelativePose]]) -> "ConditionBundle":
        tensor = torch.stack([poses_to_tensor(row, embedding.dtype) for row in poses])
        return cls(embedding=embedding, poses=tensor)

    @property
    def n_views(self) -> int:
        return self.poses.shape[1]


@dataclass(frozen=True)
class DiffusionBatch:
    latents: torch.Tensor  # [B, V, C, h, w], clean
    timesteps: torch.Tensor  # [B, V], integers in [1, T]
    noises: torch.Tensor  # like latents
    condition: ConditionBundle
    drop_condition: Optional[torch.Tensor] = None  # [B] bool, True -> null embedding

    def __post_init__(self):
        if self.latents.dim() != 5:
            raise ContractViolation("latents must be [B, V, C, h, w]", {"shape": list(self.latents.shape)})
        if self.noises.shape != self.latents.shape:
            raise ContractViolation("noises must match latents", {"shape": list(self.noises.shape)})
        if tuple(self.timesteps.shape) != tuple(self.latents.shape[:2]):
            raise ContractViolation("timesteps must be [B, V]", {"shape": list(self.timesteps.shape)})
        if self.condition.poses.shape[:2] != self.latents.shape[:2]:
            raise ContractViolation(
                "pose count must equal the target-slot count",
                {"poses": list(self.condition.poses.shape), "latents": list(self.latents.shape)},
            )
        if bool((self.timesteps < 1).any()):
            raise ContractViolation("target timesteps must be >= 1", {"min": int(self.timesteps.min())})

    @property
    def n_views(self) -> int:
        return self.latents.shape[1]


@dataclass(frozen=True)
class EMABatch:
    """Noise-free reference latent (slot 0, t = 0, zero pose) plus noisy targets."""

    reference_latent: torch.Tensor  # [B, C, h, w]
    targets: DiffusionBatch
    reference_timestep: int = 0
    reference_noise: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.reference_timestep != 0:
            raise ContractViolation(
                "the reference slot is noise-free: its timestep must be 0",
                {"reference_timestep": self.reference_timestep},
                component="diffusion",
            )
        if self.reference_noise is not None and bool(self.reference_noise.ne(0).any()):
            raise ContractViolation("the reference slot noise must be the zero array", component="diffusion")
        if self.reference_latent.shape != self.targets.latents[:, 0].shape:
            raise ContractViolation(
                "reference latent must match one target slot",
                {"reference": list(self.reference_latent.shape), "target": list(self.targets.latents.shape)},
                component="diffusion",
            )

    @property
    def reference_pose(self) -> RelativePose:
        return RelativePose.zero(float(self.targets.condition.poses[0, 0, 2]))

    def joint_inputs(self, noisy_targets: torch.Tensor):
        """(latents, timesteps, poses, is_reference) of the [B, V + 1] joint sequence."""
        targets = self.targets
        batch = targets.latents.shape[0]
        latents = torch.cat([self.reference_latent.unsqueeze(1), noisy_targets], dim=1)
        timesteps = torch.cat([torch.zeros_like(targets.timesteps[:, :1]), targets.timesteps], dim=1)
        ref_pose = torch.zeros(batch, 1, 3, dtype=targets.condition.poses.dtype)
        ref_pose[..., 2] = targets.condition.poses[:, :1, 2]
        poses = torch.cat([ref_pose, targets.condition.poses], dim=1)
        is_reference = torch.zeros(targets.n_views + 1, dtype=torch.bool)
        is_reference[0] = True
        return latents, timesteps, poses, is_reference


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Objectives
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def loss_mv(model: NoisePredictor, batch: DiffusionBatch, schedule: NoiseSchedule) -> torch.Tensor:
    z_t = forward_diffuse(batch.latents, batch.timesteps, batch.noises, schedule)
    pred = model(
        z_t,
        batch.timesteps,
        batch.condition.poses,
        batch.condition.embedding,
        drop_condition=batch.drop_condition,
    )
    return F.mse_loss(pred, batch.noises)


def loss_ema(model: NoisePredictor, batch: EMABatch, schedule: NoiseSchedule) -> torch.Tensor:
    """Epsilon-MSE over target slots; the slot-0 prediction is computed and discarded."""
    targets = batch.targets
    z_t = forward_diffuse(targets.latents, targets.timesteps, targets.noises, schedule)
    latents, timesteps, poses, is_reference = batch.joint_inputs(z_t)
    pred = model(
        latents,
        timesteps,
        poses,
        targets.condition.embedding,
        drop_condition=targets.drop_condition,
        is_reference=is_reference,
    )
    return F.mse_loss(pred[:, 1:], targets.noises)


def cfg_predict(
    model: NoisePredictor,
    latents: torch.Tensor,
    timesteps: torch.Tensor,
    poses: torch.Tensor,
    embedding: torch.Tensor,
    scale: float,
    is_reference: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond); the uncond pass swaps in the null embedding."""
    if scale < 0:
        raise ContractViolation(f"guidance scale must be >= 0, got {scale}", component="diffusion")
    if scale == 1.0:
        return model(latents, timesteps, poses, embedding, is_reference=is_reference)

    drop = torch.ones(latents.shape[0], dtype=torch.bool, device=latents.device)
    uncond = model(latents, timesteps, poses, embedding, drop_condition=drop, is_reference=is_reference)
    if scale == 0.0:
        return uncond
    cond = model(latents, timesteps, poses, embedding, is_reference=is_reference)
    return uncond + scale * (cond - uncond)
