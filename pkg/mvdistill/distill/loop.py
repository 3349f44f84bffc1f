"""
mvdistill: Distillation Loop

Optimises a radiance field with SDS and orientation losses only. The loop
takes an embedding, never an image: the reference view is discarded before
this point and the four rendered views are the only slots the denoiser sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from mvdistill.core.config import CameraConfig, DistillConfig, SamplerConfig, Shading
from mvdistill.core.errors import FieldDivergedError
from mvdistill.core.logging import get_logger
from mvdistill.data.repository import write_png
from mvdistill.diffusion.losses import NoisePredictor, poses_to_tensor
from mvdistill.diffusion.sampler import denoise_latents, require_embedding
from mvdistill.diffusion.schedule import NoiseSchedule
from mvdistill.distill.field import RadianceField, field_digest
from mvdistill.distill.render import render, render_to_image
from mvdistill.distill.sds import (
    LAMBDA_O_HORIZON,
    anneal_window,
    lambda_o,
    orientation_loss,
    sds_grad,
    sds_loss,
)
from mvdistill.geometry.camera import DEFAULT_CAMERA, TWO_PI, CameraPose, RelativePose, relative_pose
from mvdistill.models.codec import LatentCodec

logger = get_logger(__name__)

PoseSampler = Callable[[np.random.Generator, int], List[CameraPose]]


def orbit_poses(camera: CameraConfig = DEFAULT_CAMERA) -> PoseSampler:
    """Shared random elevation, azimuths 360/n apart from a random base."""

    def sample(rng: np.random.Generator, n_views: int) -> List[CameraPose]:
        elevation = rng.uniform(math.radians(camera.elevation_min_deg), math.radians(camera.elevation_max_deg))
        base = rng.uniform(0.0, TWO_PI)
        return [
            CameraPose(elevation=float(elevation), azimuth=base + k * TWO_PI / n_views, distance=camera.distance)
            for k in range(n_views)
        ]

    return sample


@dataclass
class DistillResult:
    field: RadianceField
    digest: str
    losses: List[float] = dataclass_field(default_factory=list)


def _step_streams(seed: int, step: int):
    seq = np.random.SeedSequence([seed, step])
    pose_seq, torch_seq = seq.spawn(2)
    generator = torch.Generator().manual_seed(int(torch_seq.generate_state(1)[0]))
    return np.random.default_rng(pose_seq), generator


def distill(
    denoiser: NoisePredictor,
    embedding: torch.Tensor,
    config: DistillConfig,
    *,
    schedule: NoiseSchedule,
    codec: LatentCodec,
    camera: CameraConfig = DEFAULT_CAMERA,
    pose_sampler: Optional[PoseSampler] = None,
    sampler_config: Optional[SamplerConfig] = None,
) -> DistillResult:
    """
    Per step: sample views, render them, encode to latents, take one SDS
    gradient through the joint forward pass and add lambda_o(step) times the
    orientation loss. L = lambda_e * L_sds + lambda_o * L_orient, AdamW.

    With `config.use_reference_slot` a zero-pose view is sampled once up front
    (steps and eta from `sampler_config`) and fills the noise-free slot.
    """
    embedding = require_embedding(embedding, getattr(denoiser, "embedding_dim", None))
    if isinstance(denoiser, torch.nn.Module):
        denoiser.requires_grad_(False)
        denoiser.eval()

    sampler = pose_sampler or orbit_poses(camera)
    reference_pose = CameraPose.from_degrees(config.reference_elevation_deg, 0.0, camera.distance)
    field = RadianceField.from_config(config)
    optimizer = torch.optim.AdamW(field.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    fov_y = math.radians(camera.fov_y_deg)

    reference = None
    if config.use_reference_slot:
        sampling = sampler_config or SamplerConfig()
        dtype = next(field.parameters()).dtype
        size = codec.latent_size(config.render_resolution)
        anchor = poses_to_tensor([RelativePose.zero(camera.distance)], dtype)
        reference = denoise_latents(
            denoiser,
            embedding.to(dtype),
            anchor,
            schedule,
            (codec.config.C_lat, size, size),
            config.guidance_scale,
            sampling.steps,
            torch.Generator().manual_seed(config.seed),
            eta=0.0 if sampling.deterministic else 1.0,
        )[0]

    result = DistillResult(field=field, digest="")
    for step in range(config.steps):
        rng, generator = _step_streams(config.seed, step)
        poses = sampler(rng, config.views_per_step)
        t_window = schedule.window(anneal_window(step, config))
        weight_o = lambda_o(min(step, LAMBDA_O_HORIZON))

        optimizer.zero_grad(set_to_none=True)
        lambert = float(rng.uniform()) if config.shading == Shading.SOFT_BLEND else None
        renders = [
            render(
                field,
                pose,
                config.render_resolution,
                config.shading,
                samples_per_ray=config.samples_per_ray,
                generator=generator,
                lambert_weight=lambert,
                light_jitter=config.light_jitter,
                fov_y=fov_y,
            )
            for pose in poses
        ]
        latents = codec.encode_latent(torch.stack([r.rgb for r in renders]))
        rel = poses_to_tensor([relative_pose(reference_pose, p) for p in poses])
        sds = sds_grad(
            denoiser, schedule, latents, embedding, rel, t_window, config.guidance_scale, generator, reference
        )
        loss_sds = sds_loss(latents, sds.grad)
        loss_orient = torch.stack(
            [orientation_loss(r, visibility_threshold=config.visibility_threshold) for r in renders]
        ).mean()
        total = config.lambda_e * loss_sds + weight_o * loss_orient

        if not torch.isfinite(total) or not all(torch.isfinite(r.rgb).all() for r in renders):
            raise FieldDivergedError(
                f"non-finite field output at step {step}",
                {"step": step, "t": sds.t, "sds": float(loss_sds), "orient": float(loss_orient)},
            )
        total.backward()
        optimizer.step()
        result.losses.append(float(total))

        if (step + 1) % config.log_every == 0:
            logger.info(
                "distill_step",
                step=step + 1,
                t=sds.t,
                t_window=list(t_window),
                sds=round(float(loss_sds), 6),
                orient=round(float(loss_orient), 6),
                lambda_o=weight_o,
            )

    result.digest = field_digest(field)
    logger.info("distill_finished", steps=config.steps, digest=result.digest)
    return result


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Turntable
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def turntable_poses(n_frames: int, camera: CameraConfig = DEFAULT_CAMERA) -> List[CameraPose]:
    return [
        CameraPose.from_degrees(camera.fixed_elevation_deg, 360.0 * k / n_frames, camera.distance)
        for k in range(n_frames)
    ]


@torch.no_grad()
def _image(field: RadianceField, pose: CameraPose, resolution: int, samples: int) -> np.ndarray:
    out = render(
        field,
        pose,
        resolution,
        Shading.LAMBERTIAN_POINT_LIGHT,
        samples_per_ray=samples,
        stratified=False,
    )
    return render_to_image(out)


def render_turntable(
    field: RadianceField,
    n_frames: int,
    out_dir: Path,
    resolution: int = 64,
    samples_per_ray: int = 64,
    camera: CameraConfig = DEFAULT_CAMERA,
) -> List[Path]:
    """Numbered frames plus a 2x3 grid of six evenly spaced views."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, pose in enumerate(turntable_poses(n_frames, camera)):
        path = out_dir / f"frame_{k:03d}.png"
        write_png(path, _image(field, pose, resolution, samples_per_ray))
        written.append(path)

    tiles = [_image(field, p, resolution, samples_per_ray) for p in turntable_poses(6, camera)]
    grid = np.concatenate([np.concatenate(tiles[:3], axis=1), np.concatenate(tiles[3:], axis=1)], axis=0)
    grid_path = out_dir / "grid.png"
    write_png(grid_path, grid)
    written.append(grid_path)
    logger.info("turntable_rendered", frames=n_frames, out=str(out_dir))
    return written
