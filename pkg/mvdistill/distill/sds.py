"""
mvdistill: Score Distillation

SDS gradient with w(t) = 1 from a frozen denoiser, the surrogate loss that
carries it into the renderer, the orientation regulariser, and the step
schedules of the distillation loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from mvdistill.core.config import DistillConfig
from mvdistill.core.errors import ContractViolation
from mvdistill.diffusion.losses import NoisePredictor, cfg_predict
from mvdistill.diffusion.schedule import NoiseSchedule, forward_diffuse
from mvdistill.distill.render import RenderOutput

LAMBDA_O_HORIZON = 10000
LAMBDA_O_RAMP_END = 5000
LAMBDA_O_MAX = 1000.0


@dataclass(frozen=True)
class SDSResult:
    grad: torch.Tensor  # [V, C, h, w]
    t: int
    noise: torch.Tensor


def sds_grad(
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    latents: torch.Tensor,
    embedding: torch.Tensor,
    poses: torch.Tensor,
    t_window: Tuple[int, int],
    guidance_scale: float,
    generator: Optional[torch.Generator] = None,
    reference: Optional[torch.Tensor] = None,
) -> SDSResult:
    """
    eps_hat - eps for rendered latents [V, C, h, w], one t drawn uniformly
    from the inclusive integer window and shared by all views. Nothing here
    records a graph through the denoiser. With `reference`, a noise-free slot 0
    joins the sequence and its prediction is dropped.
    """
    low, high = t_window
    if not 1 <= low <= high <= schedule.T:
        raise ContractViolation(f"t window {t_window} outside [1, {schedule.T}]", component="distill")
    t = int(torch.randint(low, high + 1, (1,), generator=generator))
    clean = latents.detach()
    eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)

    with torch.no_grad():
        z_t = forward_diffuse(clean, t, eps, schedule).unsqueeze(0)
        timesteps = torch.full((1, clean.shape[0]), t, dtype=torch.long)
        slot_poses = poses.unsqueeze(0).to(clean.dtype)
        is_reference = None
        if reference is not None:
            z_t = torch.cat([reference.reshape(1, 1, *clean.shape[1:]).to(clean.dtype), z_t], dim=1)
            timesteps = torch.cat([torch.zeros(1, 1, dtype=torch.long), timesteps], dim=1)
            ref_pose = torch.zeros(1, 1, 3, dtype=clean.dtype)
            ref_pose[..., 2] = slot_poses[:, :1, 2]
            slot_poses = torch.cat([ref_pose, slot_poses], dim=1)
            is_reference = torch.zeros(clean.shape[0] + 1, dtype=torch.bool)
            is_reference[0] = True
        eps_hat = cfg_predict(
            denoiser, z_t, timesteps, slot_poses, embedding.reshape(1, -1).to(clean.dtype), guidance_scale, is_reference
        )[0]
        if reference is not None:
            eps_hat = eps_hat[1:]
    return SDSResult(grad=eps_hat - eps, t=t, noise=eps)


def sds_loss(latents: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """0.5 ||z - sg(z - g)||^2 / V, whose gradient with respect to z is g / V."""
    target = (latents - grad).detach()
    return 0.5 * ((latents - target) ** 2).sum() / latents.shape[0]


def orientation_loss(
    render: RenderOutput,
    view_dirs: Optional[torch.Tensor] = None,
    visibility_threshold: float = 1e-4,
) -> torch.Tensor:
    """
    Sum over samples of sg(w_i) * max(0, n_i . v)^2 for visible samples
    (w_i > threshold), averaged over rays. `v` is the ray direction, so normals
    facing the camera contribute nothing.
    """
    if render.normals is None:
        raise ContractViolation("orientation loss needs a render with normals", component="distill")
    v = render.ray_dirs if view_dirs is None else view_dirs
    v = v.to(render.normals.dtype)
    while v.dim() < render.normals.dim():
        v = v.unsqueeze(-2)
    weights = render.weights.detach()
    facing = (render.normals * v).sum(dim=-1).clamp(min=0.0) ** 2
    visible = (weights > visibility_threshold).to(weights.dtype)
    per_ray = (weights * visible * facing).sum(dim=-1)
    return per_ray.mean()


def lambda_o(step: int) -> float:
    if not 0 <= step <= LAMBDA_O_HORIZON:
        raise ContractViolation(
            f"lambda_o is defined on [0, {LAMBDA_O_HORIZON}], got {step}", {"step": step}, component="distill"
        )
    # 0.2 per step up to the ramp end, written as a ratio so the constants compare exactly
    return LAMBDA_O_MAX * step / LAMBDA_O_RAMP_END if step <= LAMBDA_O_RAMP_END else LAMBDA_O_MAX


def anneal_window(step: int, config: DistillConfig) -> Tuple[float, float]:
    """(t_min, t_max) as fractions of T; t_max falls linearly until anneal_steps."""
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}", component="distill")
    if step >= config.anneal_steps:
        return config.t_min, config.t_max_end
    frac = step / config.anneal_steps
    return config.t_min, config.t_max_start + (config.t_max_end - config.t_max_start) * frac
