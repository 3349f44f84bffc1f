"""
mvdistill: Record Schemas

Strict pydantic models for everything written to disk: toy objects, dataset
manifests and sidecars, run manifests, evaluation reports, and error payloads.
"""

from __future__ import annotations

from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DATASET_SCHEMA_VERSION = 1
RUN_MANIFEST_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Toy Objects
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class Primitive(_Record):
    """A sphere (radius = half_extent) or an axis-aligned box."""

    shape: Literal["sphere", "box"]
    center: Tuple[float, float, float]
    half_extent: float = Field(gt=0, le=0.3)
    albedo: Tuple[float, float, float]

    @field_validator("center")
    @classmethod
    def _center_in_cube(cls, v):
        if any(abs(c) > 0.4 for c in v):
            raise ValueError("primitive centers must lie in [-0.4, 0.4]^3")
        return v

    @field_validator("albedo")
    @classmethod
    def _albedo_unit(cls, v):
        if any(not 0.0 <= c <= 1.0 for c in v):
            raise ValueError("albedo must lie in [0, 1]^3")
        return v

    @property
    def bounding_radius(self) -> float:
        """Distance from the world origin to the farthest point of the primitive."""
        reach = self.half_extent * (3.0 ** 0.5 if self.shape == "box" else 1.0)
        return sum(c * c for c in self.center) ** 0.5 + reach


class ToyObject(_Record):
    object_id: str
    primitives: List[Primitive] = Field(min_length=1, max_length=4)

    @model_validator(mode="after")
    def _fits_unit_sphere(self) -> "ToyObject":
        for prim in self.primitives:
            if prim.bounding_radius > 1.0 + 1e-9:
                raise ValueError(f"primitive of {self.object_id} leaves the unit sphere")
        return self


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Dataset Shards
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class PoseRecord(_Record):
    """Camera pose as stored on disk: degrees, not radians."""

    elevation_deg: float
    azimuth_deg: float
    distance: float


class ViewKind(str, Enum):
    RANDOM = "random"
    FIXED = "fixed"


class ViewRecord(_Record):
    kind: ViewKind
    index: int
    file: str
    pose: PoseRecord


class ObjectSidecar(_Record):
    """Per-object metadata written next to the object's images."""

    schema_version: int = DATASET_SCHEMA_VERSION
    object: ToyObject
    seed: int
    resolution: int
    views: List[ViewRecord]


class ManifestEntry(_Record):
    object_id: str
    seed: int
    directory: str


class DatasetManifest(_Record):
    schema_version: int = DATASET_SCHEMA_VERSION
    n_objects: int
    seed: int
    resolution: int
    views_per_object: int
    fov_y_deg: float
    objects: List[ManifestEntry]


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Runs & Reports
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class RunManifest(_Record):
    """One per output directory: what ran, with which config, producing what."""

    schema_version: int = RUN_MANIFEST_SCHEMA_VERSION
    command: str
    argv: List[str] = Field(default_factory=list)
    config_hash: str
    config: Dict[str, Any]
    code_version: str
    started_at: datetime = Field(default_factory=_utcnow)
    finished_at: Optional[datetime] = None
    artifacts: Dict[str, str] = Field(default_factory=dict, description="relative path -> sha256")


class ThresholdCheck(_Record):
    metric: str
    criterion: str = Field(description="Group the threshold belongs to")
    comparator: Literal[">=", "<=", "=="]
    threshold: float
    value: Optional[float] = None
    passed: Optional[bool] = None


class EvalReport(_Record):
    schema_version: int = REPORT_SCHEMA_VERSION
    suite: str
    metrics: Dict[str, float] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)
    checks: List[ThresholdCheck] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=_utcnow)

    @property
    def passed(self) -> bool:
        return all(check.passed is not False for check in self.checks)


class ErrorResponse(_Record):
    """Standardised one-line error payload printed by the CLI."""

    error_code: str
    component: str
    message: str
    details: Optional[Dict[str, Any]] = None
