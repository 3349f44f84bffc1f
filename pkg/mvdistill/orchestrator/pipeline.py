"""
mvdistill: Pipeline Stages

Each stage takes a resolved ExperimentConfig plus its inputs, writes into one
output directory, and returns a CommandResult. The CLI handlers and the smoke
pipeline drive the same stages:

    build-dataset → train-stage1 → train-stage2 → sample-views
                                               ↘ distill → render-turntable
                                                                  ↓
                                                                eval
"""

from __future__ import annotations

import hashlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from mvdistill import __version__
from mvdistill.commands.registry import CommandResult
from mvdistill.core.config import ExperimentConfig, Stage, config_hash
from mvdistill.core.errors import CheckpointError, ContractViolation
from mvdistill.core.logging import get_logger, run_context
from mvdistill.data.repository import DatasetRepository, load_dataset, read_png, write_png
from mvdistill.data.synth import build_dataset
from mvdistill.diffusion.sampler import sample_views
from mvdistill.diffusion.schedule import schedule_from_config
from mvdistill.distill.field import field_digest, load_field, save_field
from mvdistill.distill.loop import distill, render_turntable
from mvdistill.eval.evaluator import run_suite
from mvdistill.geometry.camera import RelativePose
from mvdistill.models.checkpoint import LoadedCheckpoint, init_denoiser_config, load_checkpoint
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import MultiViewDenoiser
from mvdistill.schemas.models import RunManifest
from mvdistill.training.batches import PreparedObject, prepare_objects
from mvdistill.training.trainer import FINAL_CHECKPOINT, train

logger = get_logger(__name__)

RUN_MANIFEST_NAME = "run_manifest.json"
REPORT_NAME = "report.json"
FIELD_NAME = "field.pt"
DEFAULT_POSES_DEG = ((0.0, 0.0), (0.0, 90.0), (0.0, 180.0), (0.0, 270.0))


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Run Manifests
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(
    result: CommandResult,
    command: str,
    config: ExperimentConfig,
    argv: Sequence[str] = (),
    started_at: Optional[datetime] = None,
) -> Path:
    """The single run_manifest.json of `result.out_dir`, digests keyed by relative path."""
    out_dir = Path(result.out_dir)
    artifacts = {}
    for path in sorted(set(result.artifacts)):
        path = Path(path)
        if path.name == RUN_MANIFEST_NAME or not path.is_file():
            continue
        try:
            key = path.relative_to(out_dir).as_posix()
        except ValueError:
            key = path.as_posix()
        artifacts[key] = sha256_file(path)

    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config_hash=config_hash(config),
        config=config.model_dump(mode="json"),
        code_version=__version__,
        started_at=started_at or datetime.now(timezone.utc),
        finished_at=datetime.now(timezone.utc),
        artifacts=artifacts,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("run_manifest_written", path=str(path), n_artifacts=len(artifacts))
    return path


def _files(root: Path) -> List[Path]:
    return sorted(p for p in Path(root).rglob("*") if p.is_file() and p.name != RUN_MANIFEST_NAME)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Stages
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def run_build_dataset(config: ExperimentConfig, out_dir: Path) -> CommandResult:
    manifest = build_dataset(
        config.dataset.n_objects,
        config.seed,
        out_dir,
        resolution=config.dataset.resolution,
        camera=config.camera,
        workers=config.dataset.workers,
    )
    return CommandResult(
        out_dir=Path(out_dir),
        artifacts=_files(out_dir),
        summary={"n_objects": manifest.n_objects, "resolution": manifest.resolution},
        config=config,
    )


def _prepare(dataset: Path, codec: LatentCodec, encoder: EmbeddingEncoder) -> List[PreparedObject]:
    return prepare_objects(load_dataset(dataset), codec, encoder)


def run_train(
    config: ExperimentConfig,
    stage: Stage,
    dataset: Path,
    out_dir: Path,
    init: Optional[Path] = None,
    resume: Optional[Path] = None,
) -> CommandResult:
    """Stage 1 from scratch (or resumed); stage 2 from a stage-1 checkpoint `init`."""
    train_config = config.stage1 if stage == Stage.STAGE1 else config.stage2
    init_params = None
    resume_state = None

    if resume is not None:
        loaded = load_checkpoint(resume)
        if loaded.train_state is None:
            raise CheckpointError("checkpoint carries no train state to resume", {"path": str(resume)})
        model, encoder, codec, schedule = loaded.denoiser, loaded.encoder, loaded.codec, loaded.schedule
        config = config.model_copy(update={"denoiser": loaded.denoiser.config})
        resume_state = loaded.train_state
    elif init is not None:
        base = load_checkpoint(init)
        encoder, codec, schedule = base.encoder, base.codec, base.schedule
        config = config.model_copy(update={"denoiser": init_denoiser_config(config.denoiser, base.denoiser.config)})
        model = MultiViewDenoiser(
            config.denoiser,
            base.denoiser.embedding_dim,
            latent_channels=base.denoiser.latent_channels,
            num_timesteps=schedule.T,
            seed=config.seed,
        )
        init_params = base.denoiser.state_dict()
    else:
        codec = LatentCodec(config.codec)
        encoder = EmbeddingEncoder(config.codec)
        schedule = schedule_from_config(config.schedule)
        model = MultiViewDenoiser(
            config.denoiser,
            config.codec.D_emb,
            latent_channels=config.codec.C_lat,
            num_timesteps=schedule.T,
            seed=config.seed,
        )

    objects = _prepare(dataset, codec, encoder)
    with run_context(stage=stage.value):
        state = train(
            train_config,
            objects,
            model,
            schedule,
            encoder=encoder,
            codec=codec,
            out_dir=out_dir,
            init_params=init_params,
            resume_state=resume_state,
        )
    return CommandResult(
        out_dir=Path(out_dir),
        artifacts=list(state.checkpoints),
        summary={
            "stage": stage.value,
            "steps": state.global_step,
            "final_loss": state.losses[-1] if state.losses else None,
            "smoothed_loss": state.history.smoothed(),
            "params_digest": field_digest(model),
            "checkpoint": str(Path(out_dir) / FINAL_CHECKPOINT),
        },
        config=config,
    )


def embed_image(checkpoint: LoadedCheckpoint, image_path: Path) -> torch.Tensor:
    """The only place an inference-time image is read; only its embedding leaves."""
    image = read_png(Path(image_path))
    embedding = checkpoint.encoder.encode_embedding(image)
    del image
    return embedding


def parse_pose(raw: str, distance: float) -> RelativePose:
    try:
        d_elevation, d_azimuth = (float(v) for v in raw.split(","))
    except ValueError as exc:
        raise ContractViolation(f"pose '{raw}' must look like d_elevation,d_azimuth in degrees", component="cli") from exc
    return RelativePose.from_degrees(d_elevation, d_azimuth, distance)


def tile(images: Sequence[np.ndarray], columns: int) -> np.ndarray:
    rows = [np.concatenate(images[i : i + columns], axis=1) for i in range(0, len(images), columns)]
    if len(rows) > 1 and rows[-1].shape != rows[0].shape:
        pad = np.ones((rows[0].shape[0], rows[0].shape[1] - rows[-1].shape[1], 3), dtype=rows[-1].dtype)
        rows[-1] = np.concatenate([rows[-1], pad], axis=1)
    return np.concatenate(rows, axis=0)


def run_sample_views(
    config: ExperimentConfig,
    checkpoint: Path,
    image: Path,
    out_dir: Path,
    poses_deg: Optional[Iterable[str]] = None,
    use_reference_slot: bool = False,
) -> CommandResult:
    loaded = load_checkpoint(checkpoint)
    embedding = embed_image(loaded, image)
    raw = list(poses_deg) if poses_deg else [f"{e},{a}" for e, a in DEFAULT_POSES_DEG]
    poses = [parse_pose(p, config.camera.distance) for p in raw]
    images = sample_views(
        loaded.denoiser.eval(),
        embedding,
        poses,
        loaded.schedule,
        codec=loaded.codec,
        resolution=config.dataset.resolution,
        scale=config.sampler.scale,
        steps=config.sampler.steps,
        generator=torch.Generator().manual_seed(config.seed if config.sampler.seed is None else config.sampler.seed),
        deterministic=config.sampler.deterministic,
        use_reference_slot=use_reference_slot,
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, view in enumerate(images):
        path = out_dir / f"view_{k:02d}.png"
        write_png(path, view)
        written.append(path)
    grid = out_dir / "grid.png"
    write_png(grid, tile(images, 4))
    written.append(grid)
    return CommandResult(out_dir=out_dir, artifacts=written, summary={"n_views": len(images), "poses_deg": raw},
        config=config,
    )


def run_distill(config: ExperimentConfig, checkpoint: Path, image: Path, out_dir: Path) -> CommandResult:
    loaded = load_checkpoint(checkpoint)
    embedding = embed_image(loaded, image)
    with run_context(stage="distill"):
        result = distill(
            loaded.denoiser,
            embedding,
            config.distill,
            schedule=loaded.schedule,
            codec=loaded.codec,
            camera=config.camera,
            sampler_config=config.sampler,
        )
    path = save_field(
        Path(out_dir) / FIELD_NAME,
        result.field,
        metadata={"digest": result.digest, "steps": config.distill.steps, "seed": config.distill.seed},
    )
    tail = result.losses[-min(50, len(result.losses)) :]
    return CommandResult(
        out_dir=Path(out_dir),
        artifacts=[path],
        summary={"field_digest": result.digest, "final_loss_mean": float(np.mean(tail)) if tail else None},
        config=config,
    )


def run_render_turntable(
    config: ExperimentConfig, field_path: Path, out_dir: Path, frames: int, resolution: int
) -> CommandResult:
    field = load_field(field_path)
    written = render_turntable(
        field,
        frames,
        out_dir,
        resolution=resolution,
        samples_per_ray=config.distill.samples_per_ray,
        camera=config.camera,
    )
    return CommandResult(out_dir=Path(out_dir), artifacts=written, summary={"frames": frames}, config=config)


def run_eval(
    config: ExperimentConfig,
    suite: str,
    report_path: Path,
    dataset: Optional[Path] = None,
    checkpoint: Optional[Path] = None,
) -> CommandResult:
    """Writes the report; a failed threshold turns into exit code 3."""
    report_path = Path(report_path)
    out_dir = report_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = load_checkpoint(checkpoint) if checkpoint is not None else None
    objects = _prepare(dataset, loaded.codec, loaded.encoder) if dataset is not None and loaded is not None else None
    report = run_suite(suite, config, objects=objects, checkpoint=loaded, out_dir=out_dir)
    report_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    failed = [c.metric for c in report.checks if c.passed is False]
    return CommandResult(
        out_dir=out_dir,
        artifacts=[report_path, *(out_dir / name for name in report.artifacts)],
        summary={"suite": suite, "passed": report.passed, "failed": failed},
        exit_code=0 if report.passed else 3,
        config=config,
    )


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Smoke
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

SMOKE_OVERRIDES: Dict[str, Dict[str, object]] = {
    "dataset": {"n_objects": 8, "resolution": 32},
    "denoiser": {"base_channels": 16, "depth": 2, "attn_heads": 2, "time_embed_dim": 32, "camera_embed_dim": 32},
    "stage1": {"steps": 200, "batch_objects": 4, "log_every": 50, "checkpoint_every": 200},
    "stage2": {"steps": 100, "batch_objects": 4, "log_every": 50, "checkpoint_every": 100},
    "sampler": {"steps": 20},
    "distill": {
        "steps": 300,
        "anneal_steps": 240,
        "render_resolution": 32,
        "samples_per_ray": 32,
        "log_every": 50,
    },
}


def smoke_config(base: ExperimentConfig) -> ExperimentConfig:
    data = base.model_dump(mode="json")
    for section, values in SMOKE_OVERRIDES.items():
        data[section].update(values)
    return ExperimentConfig.model_validate(data)


def run_smoke(config: ExperimentConfig, out_dir: Path, argv: Sequence[str] = ()) -> CommandResult:
    """
    Every stage of the pipeline at tiny scale, each in its own subdirectory
    with its own run manifest. The summary digests let two runs be compared.
    """
    out_dir = Path(out_dir)
    config = smoke_config(config)
    stages: Dict[str, CommandResult] = {}

    def record(name: str, result: CommandResult) -> CommandResult:
        write_run_manifest(result, f"smoke:{name}", result.config or config, argv)
        stages[name] = result
        return result

    dataset_dir = out_dir / "dataset"
    record("build-dataset", run_build_dataset(config, dataset_dir))
    stage1 = record("train-stage1", run_train(config, Stage.STAGE1, dataset_dir, out_dir / "stage1"))
    stage2 = record(
        "train-stage2",
        run_train(config, Stage.STAGE2, dataset_dir, out_dir / "stage2", init=Path(stage1.summary["checkpoint"])),
    )
    denoiser_ckpt = Path(stage2.summary["checkpoint"])

    manifest = DatasetRepository(dataset_dir).read_manifest()
    reference = dataset_dir / manifest.objects[0].directory / "random_00.png"
    record("sample-views", run_sample_views(config, denoiser_ckpt, reference, out_dir / "samples"))
    distilled = record("distill", run_distill(config, denoiser_ckpt, reference, out_dir / "distill"))
    record(
        "render-turntable",
        run_render_turntable(config, Path(distilled.out_dir) / FIELD_NAME, out_dir / "turntable", 8, 32),
    )
    evaluated = record("eval", run_eval(config, "units", out_dir / "eval" / REPORT_NAME))

    digests = {
        "stage1_params": stage1.summary["params_digest"],
        "stage2_params": stage2.summary["params_digest"],
        "field": distilled.summary["field_digest"],
    }
    for name in ("samples", "turntable"):
        for path in _files(out_dir / name):
            digests[f"{name}/{path.name}"] = sha256_file(path)
    logger.info("smoke_finished", out=str(out_dir), n_digests=len(digests))
    return CommandResult(
        out_dir=out_dir,
        artifacts=[path for result in stages.values() for path in result.artifacts],
        summary={"digests": digests, "eval_passed": evaluated.summary["passed"]},
        exit_code=evaluated.exit_code,
        config=config,
    )