"""
mvdistill: Multi-view Denoiser

A small UNet whose attention layers flatten tokens across (view x spatial), so
every slot in the sequence, the noise-free reference included, attends jointly.
Each slot carries its own timestep and camera embedding (summed); the global
image embedding enters through cross-attention at every resolution.

Convolutions see views folded into the batch axis; nothing in the network
knows a slot's index, only its metadata, so target slots are permutation
equivariant.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mvdistill.core.config import AttentionMode, DenoiserConfig
from mvdistill.core.errors import ContractViolation, SequenceTooLongError
from mvdistill.geometry.camera import RelativePose


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Slot Metadata
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class SlotMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestep: int = Field(ge=0)
    pose: RelativePose
    is_reference: bool = False

    @model_validator(mode="after")
    def _reference_is_clean(self) -> "SlotMeta":
        if self.is_reference and (self.timestep != 0 or self.pose.d_elevation != 0 or self.pose.d_azimuth != 0):
            raise ValueError("a reference slot needs timestep 0 and a zero relative pose")
        return self


class Branch(str, Enum):
    SINGLE_VIEW = "single_view"
    MULTI_VIEW = "multi_view"


def branch_selector(rng: np.random.Generator, p_single: float = 0.3) -> Branch:
    return Branch.SINGLE_VIEW if rng.random() < p_single else Branch.MULTI_VIEW


def assemble_ema_sequence(
    reference: torch.Tensor,
    targets: torch.Tensor,
    target_meta: Sequence[SlotMeta],
) -> Tuple[torch.Tensor, List[SlotMeta]]:
    """Reference at slot 0 (t = 0, zero pose), targets after it in input order."""
    if targets.shape[0] != len(target_meta):
        raise ContractViolation("one SlotMeta per target latent is required", component="denoiser")
    for meta in target_meta:
        if meta.is_reference or meta.timestep < 1:
            raise ContractViolation(
                "target slots must be noisy (timestep >= 1) and not marked as reference",
                {"timestep": meta.timestep, "is_reference": meta.is_reference},
                component="denoiser",
            )
    distance = target_meta[0].pose.distance if target_meta else 1.5
    ref_meta = SlotMeta(timestep=0, pose=RelativePose.zero(distance), is_reference=True)
    latents = torch.cat([reference.unsqueeze(0), targets], dim=0)
    return latents, [ref_meta, *target_meta]


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Slot Embeddings
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features [..., dim]: cos half then sin half; t = 0 gives (1, .., 1, 0, .., 0)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def camera_features(poses: torch.Tensor) -> torch.Tensor:
    """[..., 3] (d_elevation, d_azimuth, distance) -> [..., 5]."""
    d_elev, d_azim, distance = poses.unbind(-1)
    return torch.stack(
        [torch.sin(d_elev), torch.cos(d_elev), torch.sin(d_azim), torch.cos(d_azim), distance], dim=-1
    )


def _mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.SiLU(), nn.Linear(d_out, d_out))


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Blocks
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class JointAttentionBlock(nn.Module):
    """Self-attention over all (slot, y, x) tokens of an object, then cross-attention to the context."""

    def __init__(self, channels: int, heads: int, context_dim: int):
        super().__init__()
        self.heads = heads
        self.norm_self = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.out_self = nn.Linear(channels, channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.q_cross = nn.Linear(channels, channels, bias=False)
        self.kv_cross = nn.Linear(context_dim, 2 * channels, bias=False)
        self.out_cross = nn.Linear(channels, channels)
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))

    def _attend(self, q, k, v, mask=None) -> torch.Tensor:
        q, k, v = (rearrange(x, "b n (h d) -> b h n d", h=self.heads) for x in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return rearrange(out, "b h n d -> b n (h d)")

    def forward(
        self,
        x: torch.Tensor,
        n_slots: int,
        context: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        height, width = x.shape[-2:]
        tokens = rearrange(x, "(b s) c y x -> b (s y x) c", s=n_slots)

        q, k, v = self.qkv(self.norm_self(tokens)).chunk(3, dim=-1)
        tokens = tokens + self.out_self(self._attend(q, k, v, mask))

        k, v = self.kv_cross(context).chunk(2, dim=-1)
        tokens = tokens + self.out_cross(self._attend(self.q_cross(self.norm_cross(tokens)), k, v))

        tokens = tokens + self.ff(self.norm_ff(tokens))
        return rearrange(tokens, "b (s y x) c -> (b s) c y x", s=n_slots, y=height, x=width)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Network
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class MultiViewDenoiser(nn.Module):
    """Epsilon-prediction UNet over a sequence of view slots."""

    def __init__(
        self,
        config: DenoiserConfig,
        embedding_dim: int,
        latent_channels: int = 3,
        num_timesteps: int = 1000,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config
        self.embedding_dim = embedding_dim
        self.latent_channels = latent_channels
        self.num_timesteps = num_timesteps
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build()

    def _build(self) -> None:
        cfg = self.config
        emb_dim = cfg.time_embed_dim
        channels = cfg.channels

        self.time_mlp = _mlp(emb_dim, emb_dim)
        self.camera_mlp = _mlp(5, emb_dim)
        self.null_embedding = nn.Parameter(0.02 * torch.randn(self.embedding_dim))
        self.context_proj = nn.Linear(self.embedding_dim, cfg.context_tokens * emb_dim)

        self.conv_in = nn.Conv2d(self.latent_channels, channels[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c_prev = channels[0]
        for i, width in enumerate(channels):
            self.down_res.append(ResBlock(c_prev, width, emb_dim))
            self.down_attn.append(JointAttentionBlock(width, cfg.attn_heads, emb_dim))
            if i < len(channels) - 1:
                self.downsample.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            c_prev = width

        self.mid_res = ResBlock(channels[-1], channels[-1], emb_dim)
        self.mid_attn = JointAttentionBlock(channels[-1], cfg.attn_heads, emb_dim)

        self.up_res = nn.ModuleList([ResBlock(2 * w, w, emb_dim) for w in channels])
        self.up_attn = nn.ModuleList([JointAttentionBlock(w, cfg.attn_heads, emb_dim) for w in channels])
        self.upsample = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(channels[i], channels[i - 1], 3, padding=1) for i in range(1, len(channels))]
        )

        self.norm_out = _norm(channels[0])
        self.conv_out = nn.Conv2d(channels[0], self.latent_channels, 3, padding=1)

    # ── Embeddings ─────────────────────────────────────────

    def embed_timestep(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if bool((t < 0).any()) or bool((t > self.num_timesteps).any()):
            raise ContractViolation(f"timestep outside [0, {self.num_timesteps}]", component="denoiser")
        dtype = self.conv_in.weight.dtype
        return self.time_mlp(timestep_features(t, self.config.time_embed_dim).to(dtype))

    def embed_camera(self, poses: torch.Tensor) -> torch.Tensor:
        return self.camera_mlp(camera_features(poses.to(self.conv_in.weight.dtype)))

    def context(self, embedding: torch.Tensor, drop_condition: Optional[torch.Tensor] = None) -> torch.Tensor:
        """[B, D] embedding -> [B, K, E] cross-attention tokens (null embedding where dropped)."""
        if drop_condition is not None:
            embedding = torch.where(drop_condition[:, None], self.null_embedding.to(embedding.dtype), embedding)
        tokens = self.context_proj(embedding)
        return tokens.reshape(embedding.shape[0], self.config.context_tokens, self.config.time_embed_dim)

    def _attention_mask(self, n_slots: int, tokens_per_slot: int, is_reference: Optional[torch.Tensor]):
        """plain_multiview: reference and target slots never see each other."""
        if self.config.attention_mode == AttentionMode.EMA_JOINT or is_reference is None:
            return None
        if not bool(is_reference.any()):
            return None
        group = is_reference.repeat_interleave(tokens_per_slot)
        return group[:, None] == group[None, :]

    # ── Forward ────────────────────────────────────────────

    def forward(
        self,
        latents: torch.Tensor,
        timesteps: torch.Tensor,
        poses: torch.Tensor,
        embedding: torch.Tensor,
        drop_condition: Optional[torch.Tensor] = None,
        is_reference: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        batch, n_slots = latents.shape[:2]
        if n_slots > self.config.max_views:
            raise SequenceTooLongError(
                f"sequence of {n_slots} slots exceeds max_views={self.config.max_views}",
                {"slots": n_slots, "max_views": self.config.max_views},
            )
        height, width = latents.shape[-2:]
        stride = 2 ** (self.config.depth - 1)
        if height % stride or width % stride:
            raise ContractViolation(
                f"latent size {height}x{width} is not divisible by {stride}", component="denoiser"
            )
        if is_reference is not None and bool(timesteps[:, is_reference].ne(0).any()):
            raise ContractViolation("reference slots must carry timestep 0", component="denoiser")

        emb = self.embed_timestep(timesteps) + self.embed_camera(poses)
        emb = rearrange(emb, "b s e -> (b s) e")
        context = self.context(embedding, drop_condition)

        h = self.conv_in(rearrange(latents, "b s c y x -> (b s) c y x"))
        skips = []
        for i, (res, attn) in enumerate(zip(self.down_res, self.down_attn)):
            h = res(h, emb)
            h = attn(h, n_slots, context, self._attention_mask(n_slots, h.shape[-2] * h.shape[-1], is_reference))
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        h = self.mid_res(h, emb)
        h = self.mid_attn(h, n_slots, context, self._attention_mask(n_slots, h.shape[-2] * h.shape[-1], is_reference))

        for i in reversed(range(len(self.up_res))):
            h = self.up_res[i](torch.cat([h, skips[i]], dim=1), emb)
            h = self.up_attn[i](
                h, n_slots, context, self._attention_mask(n_slots, h.shape[-2] * h.shape[-1], is_reference)
            )
            if i > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(h)))
        return rearrange(out, "(b s) c y x -> b s c y x", b=batch)


def predict_noise(
    model: MultiViewDenoiser,
    latents: torch.Tensor,
    metas: Sequence[SlotMeta],
    embedding: torch.Tensor,
) -> torch.Tensor:
    """Single-object forward pass: latents [S, C, h, w] with one SlotMeta per slot."""
    if latents.shape[0] != len(metas):
        raise ContractViolation("one SlotMeta per slot is required", component="denoiser")
    timesteps = torch.tensor([[m.timestep for m in metas]], dtype=torch.long)
    poses = torch.tensor([[m.pose.as_tuple() for m in metas]], dtype=latents.dtype)
    is_reference = torch.tensor([m.is_reference for m in metas], dtype=torch.bool)
    out = model(
        latents.unsqueeze(0),
        timesteps,
        poses,
        embedding.reshape(1, -1),
        is_reference=is_reference if bool(is_reference.any()) else None,
    )
    return out[0]
