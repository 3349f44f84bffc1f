"""
mvdistill: Radiance Fields

Every field maps points [..., 3] to (density [...] >= 0, albedo [..., 3] in
[0, 1]). RadianceField is the optimised one; the analytic fields exist for
renderer verification.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Dict, Optional, Protocol, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from mvdistill.core.config import DistillConfig
from mvdistill.core.errors import CheckpointError
from mvdistill.core.logging import get_logger

logger = get_logger(__name__)

FIELD_SCHEMA_VERSION = 1


class Field(Protocol):
    def __call__(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]: ...


def positional_encoding(points: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freqs."""
    parts = [points]
    for k in range(n_freqs):
        scaled = (2.0**k) * torch.pi * points
        parts += [torch.sin(scaled), torch.cos(scaled)]
    return torch.cat(parts, dim=-1)


class RadianceField(nn.Module):
    """
    Positional-encoded MLP. Density is softplus(raw + blob), where the blob is
    a Gaussian bump at the origin that gives SDS an object to start from;
    albedo is a sigmoid. Density is zero outside the [-bound, bound]^3 box.
    """

    def __init__(
        self,
        n_freqs: int = 6,
        hidden: int = 64,
        blob_density: float = 5.0,
        blob_radius: float = 0.5,
        bound: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        self.hparams: Dict[str, Any] = {
            "n_freqs": n_freqs,
            "hidden": hidden,
            "blob_density": blob_density,
            "blob_radius": blob_radius,
            "bound": bound,
        }
        self.n_freqs = n_freqs
        self.blob_density = blob_density
        self.blob_radius = blob_radius
        self.bound = bound
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.mlp = nn.Sequential(
                nn.Linear(3 * (1 + 2 * n_freqs), hidden),
                nn.SiLU(),
                nn.Linear(hidden, hidden),
                nn.SiLU(),
                nn.Linear(hidden, 4),
            )

    @classmethod
    def from_config(cls, config: DistillConfig, seed: Optional[int] = None) -> "RadianceField":
        return cls(
            n_freqs=config.n_freqs,
            hidden=config.hidden,
            blob_density=config.blob_density,
            blob_radius=config.blob_radius,
            seed=config.seed if seed is None else seed,
        )

    def blob(self, points: torch.Tensor) -> torch.Tensor:
        r2 = (points**2).sum(dim=-1)
        return self.blob_density * torch.exp(-r2 / (2.0 * self.blob_radius**2))

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raw = self.mlp(positional_encoding(points, self.n_freqs))
        sigma = F.softplus(raw[..., 0] + self.blob(points))
        inside = (points.abs() <= self.bound).all(dim=-1)
        sigma = torch.where(inside, sigma, torch.zeros_like(sigma))
        return sigma, torch.sigmoid(raw[..., 1:])


class GaussianBlobField(nn.Module):
    """
    Eight parameters: center (3), log-scale (1), log-amplitude (1), albedo
    logits (3). Smooth everywhere, for finite-difference checks.
    """

    def __init__(self, params: Optional[Sequence[float]] = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        init = params if params is not None else [0.1, -0.05, 0.0, -1.0, 1.5, 0.3, -0.2, 0.5]
        self.params = nn.Parameter(torch.tensor(init, dtype=dtype))

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        center, log_scale, log_amp, logits = self.params[:3], self.params[3], self.params[4], self.params[5:]
        r2 = ((points - center) ** 2).sum(dim=-1)
        sigma = torch.exp(log_amp) * torch.exp(-r2 / (2.0 * torch.exp(2.0 * log_scale)))
        albedo = torch.sigmoid(logits).expand(*points.shape[:-1], 3)
        return sigma, albedo


class SphereField(nn.Module):
    """Constant density inside a sphere at the origin."""

    def __init__(self, radius: float = 0.5, density: float = 200.0, albedo=(0.8, 0.3, 0.2)):
        super().__init__()
        self.radius = radius
        self.density = density
        self.register_buffer("albedo", torch.tensor(albedo, dtype=torch.float32))

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        inside = (points**2).sum(dim=-1) <= self.radius**2
        sigma = inside.to(points.dtype) * self.density
        return sigma, self.albedo.to(points.dtype).expand(*points.shape[:-1], 3)


class SlabField(nn.Module):
    """Constant density where |x . axis - offset| <= half_thickness."""

    def __init__(self, density: float, half_thickness: float, axis=(1.0, 0.0, 0.0), offset: float = 0.0):
        super().__init__()
        self.density = density
        self.half_thickness = half_thickness
        self.offset = offset
        self.register_buffer("axis", F.normalize(torch.tensor(axis, dtype=torch.float64), dim=0))

    def forward(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        coord = (points * self.axis.to(points.dtype)).sum(dim=-1) - self.offset
        sigma = (coord.abs() <= self.half_thickness).to(points.dtype) * self.density
        return sigma, torch.full((*points.shape[:-1], 3), 0.5, dtype=points.dtype)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Persistence
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def field_digest(field: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(field.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_field(path: Path, field: RadianceField, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    payload = {
        "schema_version": FIELD_SCHEMA_VERSION,
        "field_config": dict(field.hparams),
        "params": {k: v.detach().cpu().clone() for k, v in field.state_dict().items()},
        "metadata": metadata or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write field {path}: {exc}", {"path": str(path)}) from exc
    logger.info("field_saved", path=str(path))
    return path


def load_field(path: Path) -> RadianceField:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"field checkpoint not found: {path}", {"path": str(path)})
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read field {path}: {exc}", {"path": str(path)}) from exc
    if payload.get("schema_version") != FIELD_SCHEMA_VERSION:
        raise CheckpointError("unsupported field schema_version", {"found": payload.get("schema_version")})
    field = RadianceField(**payload["field_config"])
    field.load_state_dict(payload["params"])
    return field
