"""
mvdistill: Core Configuration

Experiment configuration as strict pydantic models (unknown keys rejected),
layered as defaults <- JSON file <- command-line overrides, plus a small
pydantic-settings object for the one process-level override (output root).
"""

from __future__ import annotations

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from mvdistill.core.errors import ConfigError

CONFIG_SCHEMA_VERSION = 1


class AttentionMode(str, Enum):
    EMA_JOINT = "ema_joint"
    PLAIN_MULTIVIEW = "plain_multiview"


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class LrSchedule(str, Enum):
    CONSTANT_WITH_WARMUP = "constant_with_warmup"
    LINEAR_PEAK = "linear_peak"


class Shading(str, Enum):
    ALBEDO = "albedo"
    LAMBERTIAN_POINT_LIGHT = "lambertian_point_light"
    SOFT_BLEND = "soft_blend"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Sections
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class CameraConfig(_Section):
    """World frame: right-handed, +z up, every camera looks at the origin."""

    distance: float = Field(1.5, gt=0, description="Camera distance, shared by every view")
    fov_y_deg: float = Field(49.1, gt=0, lt=180)
    elevation_min_deg: float = Field(-10.0, description="Lower bound of random-view elevation")
    elevation_max_deg: float = Field(40.0, description="Upper bound of random-view elevation")
    fixed_elevation_deg: float = Field(30.0, description="Elevation of the evenly spaced fixed views")
    views_per_object: int = Field(16, ge=1, description="Random and fixed views rendered per object")


class DatasetConfig(_Section):
    n_objects: int = Field(64, ge=1)
    resolution: int = Field(64, description="Desk-scale render resolution")
    workers: int = Field(1, ge=1, description="Rasterization threads; output is identical to serial")

    @field_validator("resolution")
    @classmethod
    def _supported_resolution(cls, v: int) -> int:
        if v not in (32, 64, 128):
            raise ValueError("resolution must be one of 32, 64, 128")
        return v


class CodecConfig(_Section):
    pool_factor: int = Field(4, description="Average-pool factor of the latent codec")
    C_lat: int = Field(3, description="Latent channels; the pooling codec keeps RGB")
    D_emb: int = Field(64, ge=1, description="Frozen image-embedding width")
    embed_seed: int = Field(1234, description="Seed of the frozen embedding encoder weights")
    embedding_variant: str = Field("pooled", description="Reserved: which encoder output conditions the model")

    @field_validator("pool_factor")
    @classmethod
    def _pool(cls, v: int) -> int:
        if v not in (1, 2, 4):
            raise ValueError("pool_factor must be one of 1, 2, 4")
        return v

    @field_validator("C_lat")
    @classmethod
    def _channels(cls, v: int) -> int:
        if v != 3:
            raise ValueError("the pooling codec produces exactly 3 latent channels")
        return v

    @field_validator("embedding_variant")
    @classmethod
    def _variant(cls, v: str) -> str:
        if v != "pooled":
            raise ValueError("only the 'pooled' embedding variant is implemented")
        return v


class ScheduleConfig(_Section):
    T: int = Field(1000, ge=1)
    beta_min: float = Field(1e-4)
    beta_max: float = Field(2e-2)

    @model_validator(mode="after")
    def _beta_range(self) -> "ScheduleConfig":
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ValueError("require 0 < beta_min < beta_max < 1")
        return self


class DenoiserConfig(_Section):
    base_channels: int = Field(32, ge=1)
    depth: int = Field(2, ge=1, description="Down/up stages of the UNet")
    attn_heads: int = Field(4, ge=1)
    time_embed_dim: int = Field(128, ge=2)
    camera_embed_dim: int = Field(128, ge=2)
    context_tokens: int = Field(4, ge=1, description="Cross-attention tokens unpacked from the image embedding")
    max_views: int = Field(5, ge=1, description="Four targets plus one reference slot")
    attention_mode: AttentionMode = AttentionMode.EMA_JOINT

    @model_validator(mode="after")
    def _consistent(self) -> "DenoiserConfig":
        if self.camera_embed_dim != self.time_embed_dim:
            raise ValueError("camera_embed_dim must equal time_embed_dim (embeddings are summed per slot)")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.attention_mode == AttentionMode.EMA_JOINT and self.max_views < 5:
            raise ValueError("ema_joint needs max_views >= 5 (four targets plus the reference)")
        for width in self.channels:
            if width % self.attn_heads:
                raise ValueError(f"channel width {width} not divisible by attn_heads={self.attn_heads}")
        return self

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]


class TrainConfig(_Section):
    stage: Stage = Stage.STAGE1
    steps: int = Field(2000, ge=1)
    batch_objects: int = Field(4, ge=1)
    lr_peak: float = Field(1e-4, gt=0)
    lr_schedule: LrSchedule = LrSchedule.CONSTANT_WITH_WARMUP
    warmup_steps: int = Field(10000, ge=0, description="Warmup before scaling to desk size")
    warmup_scale: float = Field(0.02, gt=0, description="Single scaling factor applied to warmup_steps")
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(1e-2, ge=0)
    grad_accum: int = Field(1, ge=1)
    branch_p_single: float = Field(0.3, ge=0, le=1)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    seed: int = 0
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    history_size: int = Field(200, ge=1)

    @property
    def effective_warmup_steps(self) -> int:
        return int(round(self.warmup_steps * self.warmup_scale))

    @classmethod
    def full_scale(cls, stage: Stage) -> "TrainConfig":
        """Reference values of the multi-GPU run; not runnable at desk scale."""
        if stage == Stage.STAGE1:
            return Stage1Config(steps=50000, batch_objects=768, grad_accum=4, warmup_scale=1.0)
        return Stage2Config(steps=5000, batch_objects=128, warmup_scale=1.0)


class Stage1Config(TrainConfig):
    stage: Stage = Stage.STAGE1


class Stage2Config(TrainConfig):
    stage: Stage = Stage.STAGE2
    steps: int = Field(1000, ge=1)
    lr_peak: float = Field(5e-5, gt=0)
    lr_schedule: LrSchedule = LrSchedule.LINEAR_PEAK
    warmup_steps: int = Field(500, ge=0)


class SamplerConfig(_Section):
    steps: int = Field(50, ge=1)
    scale: float = Field(10.0, ge=0, description="Classifier-free guidance scale")
    deterministic: bool = False
    seed: Optional[int] = Field(None, description="Sampling seed; None falls back to the experiment seed")


class DistillConfig(_Section):
    steps: int = Field(10000, ge=1)
    lr: float = Field(0.01, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    guidance_scale: float = Field(10.0, ge=0)
    lambda_e: float = Field(1.0, ge=0)
    t_max_start: float = 0.98
    t_max_end: float = 0.5
    t_min: float = 0.02
    anneal_steps: int = Field(8000, ge=1)
    views_per_step: int = Field(4, ge=1)
    render_resolution: int = Field(64, ge=1)
    samples_per_ray: int = Field(64, ge=2)
    shading: Shading = Shading.SOFT_BLEND
    light_jitter: float = Field(0.1, ge=0)
    reference_elevation_deg: float = Field(0.0, description="Assumed elevation of the discarded reference view")
    use_reference_slot: bool = False
    n_freqs: int = Field(6, ge=0)
    hidden: int = Field(64, ge=1)
    blob_density: float = Field(5.0, ge=0)
    blob_radius: float = Field(0.5, gt=0)
    visibility_threshold: float = Field(1e-4, ge=0)
    log_every: int = Field(100, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _window(self) -> "DistillConfig":
        if not 0.0 < self.t_min < self.t_max_end <= self.t_max_start < 1.0:
            raise ValueError("require 0 < t_min < t_max_end <= t_max_start < 1")
        return self


class EvalConfig(_Section):
    silhouette_threshold: float = Field(0.05, gt=0, lt=1)
    n_eval_objects: int = Field(4, ge=1)
    ablation_steps: int = Field(200, ge=1)
    oracle_steps: int = Field(1500, ge=1)
    oracle_resolution: int = Field(32, ge=4)
    thresholds_path: Optional[Path] = None


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Experiment
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class ExperimentConfig(_Section):
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    output_root: Path = Path("runs")
    camera: CameraConfig = Field(default_factory=CameraConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v: int) -> int:
        if v != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {v} (expected {CONFIG_SCHEMA_VERSION})")
        return v

    def substream(self, name: str) -> np.random.SeedSequence:
        """Named random substream of the global seed (dataset, train, distill, eval)."""
        tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
        return np.random.SeedSequence([self.seed, tag])

    def substream_seed(self, name: str) -> int:
        return int(self.substream(name).generate_state(1)[0])


class Settings(BaseSettings):
    """Process-level overrides read from the environment or a .env file."""

    model_config = SettingsConfigDict(
        env_prefix="MVDISTILL_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    output_root: Optional[Path] = None


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Resolution
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def _parse_override(raw: str) -> Tuple[List[str], Any]:
    if "=" not in raw:
        raise ConfigError(f"override '{raw}' must look like section.key=value", {"override": raw})
    key, _, value = raw.partition("=")
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override '{raw}' has an empty key", {"override": raw})
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return path, parsed


def _set_dotted(tree: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    node = tree
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"'{'.'.join(path)}' descends into a non-section value", {"key": ".".join(path)})
        node = child
    node[path[-1]] = value


def _format_validation_error(exc: ValidationError) -> ConfigError:
    problems = []
    for err in exc.errors():
        key = ".".join(str(part) for part in err["loc"])
        if err["type"] == "extra_forbidden":
            problems.append(f"{key}: unknown key")
        else:
            problems.append(f"{key}: {err['msg']} (got {err.get('input')!r})")
    return ConfigError("; ".join(problems), {"errors": problems})


def resolve_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    settings: Optional[Settings] = None,
) -> ExperimentConfig:
    """Layer defaults <- file <- environment output root <- overrides and validate."""
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", {"path": str(path)}) from exc
        if text.strip():
            try:
                tree = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}", {"path": str(path)}) from exc
            if not isinstance(tree, dict):
                raise ConfigError(f"config {path} must hold a JSON object", {"path": str(path)})

    settings = settings or Settings()
    if settings.output_root is not None:
        tree["output_root"] = str(settings.output_root)

    for raw in overrides:
        key_path, value = _parse_override(raw)
        _set_dotted(tree, key_path, value)

    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise _format_validation_error(exc) from exc


def config_hash(model: BaseModel, exclude: Optional[Iterable[str]] = None) -> str:
    """SHA-256 of the canonical JSON dump; dotted names in `exclude` are dropped."""
    data = model.model_dump(mode="json")
    for dotted in exclude or ():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.get(part, {})
        node.pop(parts[-1], None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
