"""
mvdistill: Multi-view Sampler

Joint ancestral sampling over every target slot, conditioned only on an image
embedding and relative poses. The sampler has no image parameter; a runtime
check rejects anything that is not an embedding vector.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
import torch

from mvdistill.core.errors import ContractViolation, InferenceContractError
from mvdistill.core.logging import get_logger
from mvdistill.diffusion.losses import NoisePredictor, cfg_predict, poses_to_tensor
from mvdistill.diffusion.schedule import NoiseSchedule
from mvdistill.geometry.camera import RelativePose
from mvdistill.models.codec import LatentCodec

logger = get_logger(__name__)


def require_embedding(embedding, dim: Optional[int] = None) -> torch.Tensor:
    """Reject anything but a 1-D embedding vector (pixel data never reaches inference)."""
    if not isinstance(embedding, torch.Tensor) or embedding.dim() != 1:
        shape = list(getattr(embedding, "shape", []))
        raise InferenceContractError(
            "inference accepts only a 1-D image embedding, not image data",
            {"type": type(embedding).__name__, "shape": shape},
        )
    if dim is not None and embedding.numel() != dim:
        raise InferenceContractError(
            f"embedding has {embedding.numel()} entries, the model expects {dim}",
            {"expected": dim, "found": embedding.numel()},
        )
    return embedding


def sampling_timesteps(T: int, steps: int) -> List[int]:
    """Strictly decreasing integer grid from T down to 1."""
    grid = np.linspace(T, 1, num=min(steps, T))
    return sorted({int(round(t)) for t in grid}, reverse=True)


def _reverse_step(
    x: torch.Tensor,
    eps: torch.Tensor,
    a_t: float,
    a_prev: float,
    eta: float,
    generator: torch.Generator,
) -> torch.Tensor:
    x0 = ((x - (1.0 - a_t) ** 0.5 * eps) / a_t**0.5).clamp(-1.0, 1.0)
    eps = (x - a_t**0.5 * x0) / (1.0 - a_t) ** 0.5
    sigma = eta * ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)) ** 0.5
    direction = max(1.0 - a_prev - sigma**2, 0.0) ** 0.5 * eps
    x = a_prev**0.5 * x0 + direction
    if sigma > 0:
        x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


@torch.no_grad()
def denoise_latents(
    model: NoisePredictor,
    embedding: torch.Tensor,
    poses: torch.Tensor,
    schedule: NoiseSchedule,
    latent_shape: Sequence[int],
    scale: float,
    steps: int,
    generator: torch.Generator,
    eta: float,
    reference: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Latents [V, C, h, w] for V target poses; `reference` fills a noise-free slot 0 when given."""
    n_views = poses.shape[0]
    x = torch.randn((1, n_views, *latent_shape), generator=generator, dtype=embedding.dtype)
    embedding = embedding.unsqueeze(0)
    is_reference = None
    if reference is not None:
        ref_pose = torch.zeros(1, 3, dtype=poses.dtype)
        ref_pose[0, 2] = poses[0, 2]
        poses = torch.cat([ref_pose, poses], dim=0)
        is_reference = torch.zeros(n_views + 1, dtype=torch.bool)
        is_reference[0] = True
    poses = poses.unsqueeze(0)

    grid = sampling_timesteps(schedule.T, steps)
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else 0
        timesteps = torch.full((1, n_views), t, dtype=torch.long)
        latents = x
        if reference is not None:
            latents = torch.cat([reference.reshape(1, 1, *latent_shape), x], dim=1)
            timesteps = torch.cat([torch.zeros(1, 1, dtype=torch.long), timesteps], dim=1)
        eps = cfg_predict(model, latents, timesteps, poses, embedding, scale, is_reference=is_reference)
        if reference is not None:
            eps = eps[:, 1:]
        x = _reverse_step(
            x, eps, float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t_prev]), eta, generator
        )
    return x[0]


def sample_views(
    model: NoisePredictor,
    embedding: torch.Tensor,
    poses: Sequence[RelativePose],
    schedule: NoiseSchedule,
    *,
    codec: LatentCodec,
    resolution: int,
    scale: float = 10.0,
    steps: int = 50,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
    use_reference_slot: bool = False,
) -> List[np.ndarray]:
    """
    Sample one image per pose, all slots denoised jointly.

    eta = 1 gives ancestral DDPM updates on the strided grid; `deterministic`
    switches to eta = 0. With `use_reference_slot` a zero-pose view is first
    sampled from the embedding alone and fed back as the noise-free reference.
    """
    if not poses:
        raise ContractViolation("sample_views needs at least one pose", component="sampler")
    embedding = require_embedding(embedding, getattr(model, "embedding_dim", None))
    generator = generator or torch.Generator().manual_seed(0)
    eta = 0.0 if deterministic else 1.0
    latent_shape = (3, codec.latent_size(resolution), codec.latent_size(resolution))
    pose_tensor = poses_to_tensor(poses, embedding.dtype)

    reference = None
    if use_reference_slot:
        anchor = poses_to_tensor([RelativePose.zero(poses[0].distance)], embedding.dtype)
        reference = denoise_latents(model, embedding, anchor, schedule, latent_shape, scale, steps, generator, eta)[0]

    latents = denoise_latents(
        model, embedding, pose_tensor, schedule, latent_shape, scale, steps, generator, eta, reference
    )
    images = codec.decode_latent(latents.float())
    logger.info(
        "views_sampled",
        n_views=len(poses),
        steps=steps,
        scale=scale,
        deterministic=deterministic,
        reference_slot=use_reference_slot,
    )
    return [image.cpu().numpy() for image in images]
