"""
mvdistill: Dataset Repository

Data access layer for rendered datasets. One directory per object holding
lossless 8-bit PNG views plus a JSON sidecar; a top-level `dataset.json`
manifest carries the schema version.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, List

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from mvdistill.core.errors import CorruptShardError, DatasetError, DatasetVersionError, MissingShardError
from mvdistill.core.logging import get_logger
from mvdistill.data.synth import ObjectRecord, RenderedView
from mvdistill.geometry.camera import CameraPose
from mvdistill.schemas.models import (
    DATASET_SCHEMA_VERSION,
    DatasetManifest,
    ObjectSidecar,
    ViewKind,
    ViewRecord,
)

logger = get_logger(__name__)

MANIFEST_NAME = "dataset.json"
SIDECAR_NAME = "meta.json"


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] reals to 8-bit RGB."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> None:
    try:
        Image.fromarray(quantize(image)).save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write image {path}: {exc}", {"path": str(path)}) from exc


def read_png(path: Path, resolution: int | None = None) -> np.ndarray:
    if not path.exists():
        raise MissingShardError(f"missing image {path}", {"path": str(path)})
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptShardError(f"corrupt image {path}: {exc}", {"path": str(path)}) from exc
    if resolution is not None and array.shape != (resolution, resolution, 3):
        raise CorruptShardError(
            f"image {path} has shape {array.shape}, expected {(resolution, resolution, 3)}",
            {"path": str(path)},
        )
    return array.astype(np.float32) / 255.0


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# DatasetRepository
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


class DatasetRepository:
    """Read/write access to one dataset root."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def prepare(self) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(f"cannot create dataset root {self.root}: {exc}", {"path": str(self.root)}) from exc

    # ── Writing ─────────────────────────────────────────────

    def save_record(self, record: ObjectRecord, resolution: int) -> str:
        directory = record.object.object_id
        obj_dir = self.root / directory
        try:
            obj_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(f"cannot create {obj_dir}: {exc}", {"path": str(obj_dir)}) from exc

        views: List[ViewRecord] = []
        for kind, rendered in ((ViewKind.RANDOM, record.random_views), (ViewKind.FIXED, record.fixed_views)):
            for index, view in enumerate(rendered):
                name = f"{kind.value}_{index:02d}.png"
                write_png(obj_dir / name, view.image)
                views.append(ViewRecord(kind=kind, index=index, file=name, pose=view.pose.to_record()))

        sidecar = ObjectSidecar(object=record.object, seed=record.seed, resolution=resolution, views=views)
        self._write_text(obj_dir / SIDECAR_NAME, sidecar.model_dump_json(indent=2))
        return directory

    def write_manifest(self, manifest: DatasetManifest) -> None:
        self._write_text(self.root / MANIFEST_NAME, manifest.model_dump_json(indent=2))

    @staticmethod
    def _write_text(path: Path, text: str) -> None:
        try:
            path.write_text(text + "\n", encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot write {path}: {exc}", {"path": str(path)}) from exc

    # ── Reading ─────────────────────────────────────────────

    def read_manifest(self) -> DatasetManifest:
        path = self.root / MANIFEST_NAME
        if not path.exists():
            raise MissingShardError(f"dataset manifest not found at {path}", {"path": str(path)})
        try:
            manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as exc:
            raise CorruptShardError(f"invalid dataset manifest {path}: {exc}", {"path": str(path)}) from exc
        if manifest.schema_version != DATASET_SCHEMA_VERSION:
            raise DatasetVersionError(
                f"dataset schema_version {manifest.schema_version} != {DATASET_SCHEMA_VERSION}",
                {"path": str(path), "found": manifest.schema_version},
            )
        return manifest

    def load_record(self, directory: str, resolution: int) -> ObjectRecord:
        obj_dir = self.root / directory
        sidecar_path = obj_dir / SIDECAR_NAME
        if not sidecar_path.exists():
            raise MissingShardError(f"missing shard {obj_dir}", {"path": str(obj_dir)})
        try:
            sidecar = ObjectSidecar.model_validate_json(sidecar_path.read_text(encoding="utf-8"))
        except ValidationError as exc:
            raise CorruptShardError(f"invalid sidecar {sidecar_path}: {exc}", {"path": str(sidecar_path)}) from exc
        if sidecar.schema_version != DATASET_SCHEMA_VERSION:
            raise DatasetVersionError(
                f"shard schema_version {sidecar.schema_version} != {DATASET_SCHEMA_VERSION}",
                {"path": str(sidecar_path)},
            )

        random_views: List[RenderedView] = []
        fixed_views: List[RenderedView] = []
        for view in sorted(sidecar.views, key=lambda v: (v.kind.value, v.index)):
            image = read_png(obj_dir / view.file, resolution)
            rendered = RenderedView(image=image, pose=CameraPose.from_record(view.pose))
            (random_views if view.kind == ViewKind.RANDOM else fixed_views).append(rendered)
        return ObjectRecord(
            object=sidecar.object, seed=sidecar.seed, random_views=random_views, fixed_views=fixed_views
        )

    def iter_records(self) -> Iterator[ObjectRecord]:
        manifest = self.read_manifest()
        for entry in manifest.objects:
            yield self.load_record(entry.directory, manifest.resolution)


def load_dataset(path: Path) -> Iterator[ObjectRecord]:
    """Stream ObjectRecords from a dataset root; the manifest is checked eagerly."""
    repo = DatasetRepository(Path(path))
    manifest = repo.read_manifest()
    logger.info("dataset_opened", path=str(path), n_objects=manifest.n_objects)
    return repo.iter_records()
