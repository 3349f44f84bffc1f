"""
mvdistill: Frozen Encoders

LatentCodec: average-pool codec mapping [0, 1] images to a [-1, 1] latent grid.
EmbeddingEncoder: a fixed-weight random convolutional feature extractor that
produces the global image embedding used as the only image-derived condition.
Neither is ever trained.
"""

from __future__ import annotations

import hashlib
from typing import Dict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mvdistill.core.config import CodecConfig
from mvdistill.core.errors import CheckpointError, ContractViolation


def _to_tensor(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(image))
    return image


def _channels_first(image: torch.Tensor) -> torch.Tensor:
    """[..., H, W, 3] -> [N, 3, H, W]."""
    return image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)


class LatentCodec:
    """Average-pool by pool_factor, then map x -> 2x - 1 (and back)."""

    def __init__(self, config: CodecConfig):
        self.config = config

    @property
    def pool_factor(self) -> int:
        return self.config.pool_factor

    def latent_size(self, resolution: int) -> int:
        return resolution // self.pool_factor

    def encode_latent(self, image) -> torch.Tensor:
        """[..., H, W, 3] in [0, 1] -> [..., C_lat, H/p, W/p]."""
        image = _to_tensor(image)
        height, width = image.shape[-3], image.shape[-2]
        p = self.pool_factor
        if height % p or width % p:
            raise ContractViolation(
                f"image size {height}x{width} is not divisible by pool_factor={p}",
                {"height": height, "width": width, "pool_factor": p},
                component="codec",
            )
        lead = image.shape[:-3]
        x = _channels_first(image)
        if p > 1:
            x = F.avg_pool2d(x, kernel_size=p, stride=p)
        latent = 2.0 * x - 1.0
        return latent.reshape(*lead, *latent.shape[-3:])

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """[..., C_lat, h, w] -> [..., h*p, w*p, 3] clamped to [0, 1]."""
        lead = latent.shape[:-3]
        x = latent.reshape(-1, *latent.shape[-3:])
        x = (x + 1.0) * 0.5
        p = self.pool_factor
        if p > 1:
            x = x.repeat_interleave(p, dim=-2).repeat_interleave(p, dim=-1)
        image = x.clamp(0.0, 1.0).permute(0, 2, 3, 1)
        return image.reshape(*lead, *image.shape[-3:])


class EmbeddingEncoder(nn.Module):
    """
    Frozen random conv extractor -> global average pool -> L2 normalisation.

    The input is inverted (1 - x) and the convolutions carry no bias, so white
    background contributes exactly zero features and the pooled vector is
    driven by the object alone.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        width = max(16, config.D_emb // 2)
        self.features = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=3, padding=1, bias=False),
            nn.Tanh(),
            nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1, bias=False),
            nn.Tanh(),
            nn.Conv2d(width, config.D_emb, kernel_size=3, stride=2, padding=1, bias=False),
            nn.Tanh(),
        )
        generator = torch.Generator().manual_seed(config.embed_seed)
        with torch.no_grad():
            for module in self.features:
                if isinstance(module, nn.Conv2d):
                    fan_in = module.weight[0].numel()
                    module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
            anchor = torch.randn(config.D_emb, generator=generator)
        # keeps blank images well defined after normalisation
        self.register_buffer("anchor", 1e-3 * anchor / anchor.norm())
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "EmbeddingEncoder":
        return super().train(False)

    @torch.no_grad()
    def forward(self, image) -> torch.Tensor:
        image = _to_tensor(image).to(self.anchor.dtype)
        single = image.dim() == 3
        x = _channels_first(1.0 - image)
        pooled = self.features(x).mean(dim=(-2, -1)) + self.anchor
        embedding = F.normalize(pooled, dim=-1)
        return embedding[0] if single else embedding.reshape(*image.shape[:-3], -1)

    def encode_embedding(self, image) -> torch.Tensor:
        """[..., H, W, 3] images in [0, 1] -> unit-norm [..., D_emb] embeddings."""
        return self(image)

    def parameter_digest(self) -> str:
        """SHA-256 over every parameter and buffer, in name order."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().to(torch.float64).cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def load_frozen(self, state: Dict[str, torch.Tensor], expected_digest: str) -> None:
        self.load_state_dict(state)
        self.requires_grad_(False)
        if self.parameter_digest() != expected_digest:
            raise CheckpointError(
                "embedding encoder parameters do not match their recorded digest",
                {"expected": expected_digest, "found": self.parameter_digest()},
            )
