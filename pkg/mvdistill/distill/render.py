"""
mvdistill: Volume Renderer

Emission-absorption quadrature over stratified samples between the near and
far planes of the unit sphere, composited on white. Normals are -grad(sigma)
normalised, taken by autograd with create_graph so losses on them reach the
field parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from mvdistill.core.config import Shading
from mvdistill.data.synth import AMBIENT
from mvdistill.distill.field import Field
from mvdistill.geometry.camera import DEFAULT_CAMERA, CameraPose, ViewFrame, generate_rays

SCENE_RADIUS = 1.0
BACKGROUND = 1.0


@dataclass(frozen=True)
class RenderOutput:
    rgb: torch.Tensor  # [H, W, 3]
    weights: torch.Tensor  # [H, W, N]
    normals: Optional[torch.Tensor]  # [H, W, N, 3]
    opacity: torch.Tensor  # [H, W]
    depth: torch.Tensor  # [H, W]
    ray_dirs: torch.Tensor  # [H, W, 3], camera -> scene
    sigma: Optional[torch.Tensor] = None  # [H, W, N]


def compute_weights(sigma: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j)."""
    optical = sigma * deltas
    accumulated = torch.cumsum(optical, dim=-1) - optical
    return torch.exp(-accumulated) * (1.0 - torch.exp(-optical))


def _field_dtype(field: Field) -> torch.dtype:
    params = list(getattr(field, "parameters", lambda: [])())
    return params[0].dtype if params else torch.float32


def render(
    field: Field,
    pose: CameraPose,
    resolution: int,
    shading: Shading = Shading.ALBEDO,
    *,
    samples_per_ray: int = 64,
    generator: Optional[torch.Generator] = None,
    stratified: bool = True,
    lambert_weight: Optional[float] = None,
    light_jitter: float = 0.0,
    compute_normals: bool = True,
    fov_y: float = math.radians(DEFAULT_CAMERA.fov_y_deg),
    dtype: Optional[torch.dtype] = None,
) -> RenderOutput:
    """
    Render one view. Shading modes: `albedo` composites albedo; the Lambertian
    mode shades each sample against a point light at the camera (jittered by
    `light_jitter`); `soft_blend` mixes the two with `lambert_weight`, drawn
    uniformly from [0, 1] when not given.
    """
    dtype = dtype or _field_dtype(field)
    shading = Shading(shading)
    needs_normals = compute_normals or shading != Shading.ALBEDO

    frame = ViewFrame.from_pose(pose, resolution, fov_y)
    origins_np, dirs_np = generate_rays(frame)
    origins = torch.from_numpy(origins_np).to(dtype)
    dirs = torch.from_numpy(dirs_np).to(dtype)

    near = max(pose.distance - SCENE_RADIUS, 0.0)
    far = pose.distance + SCENE_RADIUS
    delta = (far - near) / samples_per_ray
    lower = near + delta * torch.arange(samples_per_ray, dtype=dtype)
    if stratified:
        jitter = torch.rand((resolution, resolution, samples_per_ray), generator=generator, dtype=dtype)
    else:
        jitter = torch.full((resolution, resolution, samples_per_ray), 0.5, dtype=dtype)
    t_vals = lower + delta * jitter
    deltas = torch.full_like(t_vals, delta)

    points = origins[..., None, :] + dirs[..., None, :] * t_vals[..., None]
    normals = None
    if needs_normals:
        with torch.enable_grad():
            points = points.detach().requires_grad_(True)
            sigma, albedo = field(points)
            (grad,) = torch.autograd.grad(sigma.sum(), points, create_graph=True)
        normals = F.normalize(-grad, dim=-1, eps=1e-12)
    else:
        sigma, albedo = field(points)

    weights = compute_weights(sigma, deltas)

    if shading == Shading.ALBEDO:
        colors = albedo
    else:
        light = torch.from_numpy(pose.origin).to(dtype)
        if light_jitter > 0:
            light = light + light_jitter * torch.randn(3, generator=generator, dtype=dtype)
        to_light = F.normalize(light - points, dim=-1)
        lambert = (normals * to_light).sum(dim=-1).clamp(min=0.0)
        shaded = albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[..., None]
        if shading == Shading.LAMBERTIAN_POINT_LIGHT:
            colors = shaded
        else:
            ratio = lambert_weight
            if ratio is None:
                ratio = float(torch.rand((), generator=generator, dtype=torch.float64))
            colors = (1.0 - ratio) * albedo + ratio * shaded

    opacity = weights.sum(dim=-1)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - opacity)[..., None] * BACKGROUND
    depth = (weights * t_vals).sum(dim=-1)
    return RenderOutput(
        rgb=rgb,
        weights=weights,
        normals=normals,
        opacity=opacity,
        depth=depth,
        ray_dirs=dirs,
        sigma=sigma,
    )


def render_to_image(output: RenderOutput) -> np.ndarray:
    return output.rgb.detach().clamp(0.0, 1.0).cpu().numpy()
