"""
mvdistill: Procedural Multi-view Dataset

Random sphere/box compositions rendered by analytic ray-primitive intersection
with headlight Lambertian shading on a white background. Each object gets
16 random views and 16 evenly spaced fixed views.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from mvdistill.core.config import CameraConfig
from mvdistill.core.logging import get_logger
from mvdistill.geometry.camera import (
    DEFAULT_CAMERA,
    CameraPose,
    ViewFrame,
    fixed_view_set,
    generate_rays,
    sample_random_pose,
)
from mvdistill.schemas.models import DatasetManifest, ManifestEntry, Primitive, ToyObject

logger = get_logger(__name__)

SUPPORTED_RESOLUTIONS = (32, 64, 128)
AMBIENT = 0.25
ALBEDO_RANGE = (0.05, 0.9)
HALF_EXTENT_RANGE = (0.1, 0.3)


class RenderedView(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    image: np.ndarray  # [H, W, 3] in [0, 1]
    pose: CameraPose


class ObjectRecord(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    object: ToyObject
    seed: int
    random_views: List[RenderedView]
    fixed_views: List[RenderedView]


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Objects
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def make_toy_object(rng: np.random.Generator, object_id: str = "toy") -> ToyObject:
    """1-4 primitives, each shrunk until it fits the unit sphere."""
    primitives = []
    for _ in range(int(rng.integers(1, 5))):
        shape = "sphere" if rng.random() < 0.5 else "box"
        center = rng.uniform(-0.4, 0.4, size=3)
        reach = math.sqrt(3.0) if shape == "box" else 1.0
        limit = (1.0 - float(np.linalg.norm(center))) / reach
        half_extent = min(float(rng.uniform(*HALF_EXTENT_RANGE)), limit)
        albedo = rng.uniform(*ALBEDO_RANGE, size=3)
        primitives.append(
            Primitive(
                shape=shape,
                center=tuple(float(c) for c in center),
                half_extent=half_extent,
                albedo=tuple(float(c) for c in albedo),
            )
        )
    return ToyObject(object_id=object_id, primitives=primitives)


def object_seed(master_seed: int, index: int) -> int:
    """Per-object seed that depends only on the master seed and the object index."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Analytic Rasterizer
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def _intersect_sphere(origins: np.ndarray, dirs: np.ndarray, prim: Primitive) -> Tuple[np.ndarray, np.ndarray]:
    center = np.asarray(prim.center)
    oc = origins - center
    b = np.einsum("ij,ij->i", dirs, oc)
    c = np.einsum("ij,ij->i", oc, oc) - prim.half_extent**2
    disc = b * b - c
    hit = disc >= 0.0
    t = np.full(len(origins), np.inf)
    t_near = -b[hit] - np.sqrt(disc[hit])
    t[hit] = np.where(t_near > 0.0, t_near, np.inf)
    points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    normals = (points - center) / prim.half_extent
    return t, normals


def _intersect_box(origins: np.ndarray, dirs: np.ndarray, prim: Primitive) -> Tuple[np.ndarray, np.ndarray]:
    center = np.asarray(prim.center)
    h = prim.half_extent
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (center - h - origins) / safe
    t2 = (center + h - origins) / safe
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    hit = (t_exit >= t_enter) & (t_enter > 0.0)
    t = np.where(hit, t_enter, np.inf)

    points = origins + np.where(hit, t, 0.0)[:, None] * dirs
    local = (points - center) / h
    axis = np.abs(local).argmax(axis=1)
    normals = np.zeros_like(local)
    rows = np.arange(len(local))
    normals[rows, axis] = np.sign(local[rows, axis])
    return t, normals


def intersect_object(
    obj: ToyObject, origins: np.ndarray, dirs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit per ray: (t [N], normals [N, 3], albedo [N, 3]); t is inf on a miss."""
    best_t = np.full(len(origins), np.inf)
    best_n = np.zeros((len(origins), 3))
    best_a = np.ones((len(origins), 3))
    for prim in obj.primitives:
        if prim.shape == "sphere":
            t, normals = _intersect_sphere(origins, dirs, prim)
        else:
            t, normals = _intersect_box(origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = normals[closer]
        best_a[closer] = prim.albedo
    return best_t, best_n, best_a


def rasterize_view(
    obj: ToyObject,
    pose: CameraPose,
    resolution: int,
    fov_y: float = math.radians(DEFAULT_CAMERA.fov_y_deg),
) -> RenderedView:
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {resolution}")
    frame = ViewFrame.from_pose(pose, resolution, fov_y)
    origins, dirs = generate_rays(frame)
    flat_o = origins.reshape(-1, 3)
    flat_d = dirs.reshape(-1, 3)

    t, normals, albedo = intersect_object(obj, flat_o, flat_d)
    hit = np.isfinite(t)
    # headlight: the light sits on the camera, so it shines along each ray
    cosine = np.clip(-np.einsum("ij,ij->i", normals, flat_d), 0.0, 1.0)
    shaded = albedo * (AMBIENT + (1.0 - AMBIENT) * cosine)[:, None]
    image = np.where(hit[:, None], shaded, 1.0).reshape(resolution, resolution, 3)
    return RenderedView(image=image, pose=pose)


def silhouette_mask(
    obj: ToyObject,
    pose: CameraPose,
    resolution: int,
    fov_y: float = math.radians(DEFAULT_CAMERA.fov_y_deg),
) -> np.ndarray:
    """Boolean [H, W] mask of pixels whose center ray hits the object."""
    frame = ViewFrame.from_pose(pose, resolution, fov_y)
    origins, dirs = generate_rays(frame)
    t, _, _ = intersect_object(obj, origins.reshape(-1, 3), dirs.reshape(-1, 3))
    return np.isfinite(t).reshape(resolution, resolution)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Dataset
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def render_object_record(
    index: int,
    master_seed: int,
    resolution: int,
    camera: CameraConfig = DEFAULT_CAMERA,
) -> ObjectRecord:
    seed = object_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    obj = make_toy_object(rng, object_id=f"obj_{index:05d}")
    random_poses = [sample_random_pose(rng, camera) for _ in range(camera.views_per_object)]
    fixed_poses = fixed_view_set(camera.views_per_object, camera)
    fov_y = math.radians(camera.fov_y_deg)
    return ObjectRecord(
        object=obj,
        seed=seed,
        random_views=[rasterize_view(obj, p, resolution, fov_y) for p in random_poses],
        fixed_views=[rasterize_view(obj, p, resolution, fov_y) for p in fixed_poses],
    )


def build_dataset(
    n_objects: int,
    seed: int,
    out_path: Path,
    resolution: int = 64,
    camera: CameraConfig = DEFAULT_CAMERA,
    workers: int = 1,
) -> DatasetManifest:
    """Render n_objects records to disk; a pure function of (n_objects, seed, resolution)."""
    from mvdistill.data.repository import DatasetRepository

    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {resolution}")
    repo = DatasetRepository(Path(out_path))
    repo.prepare()

    def render(index: int) -> ObjectRecord:
        return render_object_record(index, seed, resolution, camera)

    entries: List[ManifestEntry] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map preserves index order, so parallel output equals serial output
        for record in pool.map(render, range(n_objects)):
            directory = repo.save_record(record, resolution)
            entries.append(ManifestEntry(object_id=record.object.object_id, seed=record.seed, directory=directory))
            logger.debug("object_rendered", object_id=record.object.object_id)

    manifest = DatasetManifest(
        n_objects=n_objects,
        seed=seed,
        resolution=resolution,
        views_per_object=camera.views_per_object,
        fov_y_deg=camera.fov_y_deg,
        objects=entries,
    )
    repo.write_manifest(manifest)
    logger.info("dataset_built", path=str(out_path), n_objects=n_objects, resolution=resolution, seed=seed)
    return manifest

