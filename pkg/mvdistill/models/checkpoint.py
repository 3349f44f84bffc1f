"""
mvdistill: Checkpoints

A checkpoint is a torch.save dictionary that is enough to re-run inference
without any config file: denoiser config and parameters, the frozen embedding
encoder with its digest, the codec config, the noise schedule, and the slot
order. Training checkpoints add the resumable train state.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from mvdistill.core.config import CodecConfig, DenoiserConfig
from mvdistill.core.errors import CheckpointError
from mvdistill.core.logging import get_logger
from mvdistill.diffusion.schedule import NoiseSchedule
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import MultiViewDenoiser

logger = get_logger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
SLOT_ORDER = "reference_first"


@dataclass
class LoadedCheckpoint:
    denoiser: MultiViewDenoiser
    encoder: EmbeddingEncoder
    codec: LatentCodec
    schedule: NoiseSchedule
    train_state: Optional[Dict[str, Any]] = None


def save_checkpoint(
    path: Path,
    denoiser: MultiViewDenoiser,
    encoder: EmbeddingEncoder,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    train_state: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "denoiser_config": denoiser.config.model_dump(mode="json"),
        "embedding_dim": denoiser.embedding_dim,
        "num_timesteps": denoiser.num_timesteps,
        "params": {k: v.detach().cpu().clone() for k, v in denoiser.state_dict().items()},
        "embedding_encoder": {k: v.detach().cpu().clone() for k, v in encoder.state_dict().items()},
        "embedding_digest": encoder.parameter_digest(),
        "codec_config": codec.config.model_dump(mode="json"),
        "schedule": schedule.to_dict(),
        "slot_order": SLOT_ORDER,
    }
    if train_state is not None:
        payload["train_state"] = train_state
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}", {"path": str(path)}) from exc
    logger.info("checkpoint_saved", path=str(path), has_train_state=train_state is not None)
    return path


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", {"path": str(path)})
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", {"path": str(path)}) from exc

    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema_version {version} != {CHECKPOINT_SCHEMA_VERSION}",
            {"path": str(path), "found": version},
        )
    if payload.get("slot_order") != SLOT_ORDER:
        raise CheckpointError("unsupported slot order", {"slot_order": payload.get("slot_order")})

    codec_config = CodecConfig.model_validate(payload["codec_config"])
    encoder = EmbeddingEncoder(codec_config)
    encoder.load_frozen(payload["embedding_encoder"], payload["embedding_digest"])

    denoiser = MultiViewDenoiser(
        DenoiserConfig.model_validate(payload["denoiser_config"]),
        embedding_dim=payload["embedding_dim"],
        latent_channels=codec_config.C_lat,
        num_timesteps=payload["num_timesteps"],
    )
    result = denoiser.load_state_dict(payload["params"], strict=False)
    if result.missing_keys or result.unexpected_keys:
        raise CheckpointError(
            "parameter names do not match the denoiser",
            {"missing": result.missing_keys, "unexpected": result.unexpected_keys},
        )

    logger.info("checkpoint_loaded", path=str(path))
    return LoadedCheckpoint(
        denoiser=denoiser,
        encoder=encoder,
        codec=LatentCodec(codec_config),
        schedule=NoiseSchedule.from_dict(payload["schedule"]),
        train_state=payload.get("train_state"),
    )


def init_denoiser_config(requested: DenoiserConfig, stored: DenoiserConfig) -> DenoiserConfig:
    """
    The architecture a fine-tune is built with: the initialising checkpoint's,
    with only the attention mode taken from the requested config. Any other
    difference means the parameters cannot be carried over.
    """
    mode = {"attention_mode"}
    wanted = requested.model_dump(mode="json", exclude=mode)
    found = stored.model_dump(mode="json", exclude=mode)
    differing = sorted(k for k in wanted if wanted[k] != found.get(k))
    if differing:
        raise CheckpointError(
            "denoiser config differs from the initialising checkpoint",
            {"keys": differing, "checkpoint": {k: found.get(k) for k in differing}},
        )
    return stored.model_copy(update={"attention_mode": requested.attention_mode})
