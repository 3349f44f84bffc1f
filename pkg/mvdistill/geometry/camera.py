"""
mvdistill: Camera Model

Spherical camera parameterization (elevation, azimuth, distance) in a
right-handed world frame with +z up. Every camera looks at the world origin;
camera space follows the OpenGL convention (the camera looks down -z).
Radians in memory, degrees on disk.
"""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mvdistill.core.config import CameraConfig
from mvdistill.core.errors import ContractViolation, DegeneratePoseError
from mvdistill.schemas.models import PoseRecord

TWO_PI = 2.0 * math.pi
DEFAULT_CAMERA = CameraConfig()


def wrap_angle(angle: float) -> float:
    """Wrap an angle difference into (-pi, pi]."""
    return math.pi - (math.pi - angle) % TWO_PI


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Pose Types
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class CameraPose(BaseModel):
    """Absolute camera position on a sphere around the origin."""

    model_config = ConfigDict(frozen=True)

    elevation: float = Field(ge=-math.pi / 2, le=math.pi / 2)
    azimuth: float
    distance: float = Field(gt=0)

    @field_validator("azimuth")
    @classmethod
    def _canonical_azimuth(cls, v: float) -> float:
        wrapped = v % TWO_PI
        # a tiny negative can round up to exactly 2*pi
        return 0.0 if wrapped >= TWO_PI else wrapped

    @classmethod
    def from_degrees(cls, elevation_deg: float, azimuth_deg: float, distance: float) -> "CameraPose":
        return cls(
            elevation=math.radians(elevation_deg),
            azimuth=math.radians(azimuth_deg),
            distance=distance,
        )

    @classmethod
    def from_record(cls, record: PoseRecord) -> "CameraPose":
        return cls.from_degrees(record.elevation_deg, record.azimuth_deg, record.distance)

    def to_record(self) -> PoseRecord:
        return PoseRecord(
            elevation_deg=math.degrees(self.elevation),
            azimuth_deg=math.degrees(self.azimuth),
            distance=self.distance,
        )

    @property
    def origin(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.distance * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)],
            dtype=np.float64,
        )


class RelativePose(BaseModel):
    """Pose of a target view expressed relative to a reference view."""

    model_config = ConfigDict(frozen=True)

    d_elevation: float
    d_azimuth: float
    distance: float = Field(gt=0)

    @field_validator("d_azimuth")
    @classmethod
    def _minimal_rotation(cls, v: float) -> float:
        return wrap_angle(v)

    @classmethod
    def zero(cls, distance: float = DEFAULT_CAMERA.distance) -> "RelativePose":
        return cls(d_elevation=0.0, d_azimuth=0.0, distance=distance)

    @classmethod
    def from_degrees(cls, d_elevation_deg: float, d_azimuth_deg: float, distance: float) -> "RelativePose":
        return cls(
            d_elevation=math.radians(d_elevation_deg),
            d_azimuth=math.radians(d_azimuth_deg),
            distance=distance,
        )

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.d_elevation, self.d_azimuth, self.distance)


class ViewFrame(BaseModel):
    """A pose resolved into a camera-to-world matrix plus intrinsics."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pose: CameraPose
    c2w: np.ndarray
    fov_y: float
    resolution: Tuple[int, int]

    @model_validator(mode="after")
    def _check(self) -> "ViewFrame":
        if self.c2w.shape != (4, 4):
            raise ValueError("c2w must be a 4x4 matrix")
        if min(self.resolution) < 1:
            raise ValueError("resolution must be at least 1x1")
        return self

    @classmethod
    def from_pose(
        cls,
        pose: CameraPose,
        resolution: Tuple[int, int] | int,
        fov_y: float = math.radians(DEFAULT_CAMERA.fov_y_deg),
    ) -> "ViewFrame":
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        return cls(pose=pose, c2w=pose_to_c2w(pose), fov_y=fov_y, resolution=tuple(resolution))

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.resolution[0] / math.tan(0.5 * self.fov_y)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Operations
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def pose_to_c2w(pose: CameraPose) -> np.ndarray:
    """Camera-to-world matrix whose -z axis points at the world origin."""
    if math.cos(pose.elevation) < 1e-9:
        raise DegeneratePoseError(
            "elevation of +-90 degrees leaves the up vector undefined",
            {"elevation": pose.elevation},
        )
    origin = pose.origin
    forward = -origin / np.linalg.norm(origin)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)

    c2w = np.eye(4, dtype=np.float64)
    c2w[:3, 0] = right
    c2w[:3, 1] = up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = origin
    return c2w


def relative_pose(reference: CameraPose, target: CameraPose) -> RelativePose:
    if not math.isclose(reference.distance, target.distance, rel_tol=1e-9, abs_tol=1e-12):
        raise ContractViolation(
            "relative poses require equal camera distances",
            {"reference": reference.distance, "target": target.distance},
            component="camera",
        )
    return RelativePose(
        d_elevation=target.elevation - reference.elevation,
        d_azimuth=target.azimuth - reference.azimuth,
        distance=target.distance,
    )


def sample_random_pose(rng: np.random.Generator, camera: CameraConfig = DEFAULT_CAMERA) -> CameraPose:
    """Elevation uniform in the configured band, azimuth uniform on the circle."""
    elevation = rng.uniform(math.radians(camera.elevation_min_deg), math.radians(camera.elevation_max_deg))
    azimuth = rng.uniform(0.0, TWO_PI)
    return CameraPose(elevation=float(elevation), azimuth=float(azimuth), distance=camera.distance)


def fixed_view_set(n_views: int, camera: CameraConfig = DEFAULT_CAMERA) -> List[CameraPose]:
    """Evenly spaced azimuths at the fixed elevation."""
    if n_views < 1:
        raise ContractViolation("fixed_view_set needs at least one view", {"n_views": n_views}, component="camera")
    step = 360.0 / n_views
    return [
        CameraPose.from_degrees(camera.fixed_elevation_deg, k * step, camera.distance)
        for k in range(n_views)
    ]


def generate_rays(frame: ViewFrame) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, each [H, W, 3], through pixel centers."""
    height, width = frame.resolution
    focal = frame.focal
    cols = (np.arange(width, dtype=np.float64) + 0.5 - 0.5 * width) / focal
    rows = -(np.arange(height, dtype=np.float64) + 0.5 - 0.5 * height) / focal
    x, y = np.meshgrid(cols, rows, indexing="xy")
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)

    rotation = frame.c2w[:3, :3]
    dirs = dirs_cam @ rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(frame.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs
