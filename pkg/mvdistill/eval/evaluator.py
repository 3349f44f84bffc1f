"""
mvdistill: Evaluation Harness

Three suites, each producing an EvalReport checked against the versioned
thresholds file:

  units     exact schedule constants and defaults, forward-process and
            renderer-weight invariants (seconds)
  oracle    SDS distillation driven by the closed-form oracle denoiser on a
            toy sphere (minutes)
  ablation  stage-2 fine-tuning with joint reference attention versus
            plain multi-view attention under identical seeds and budgets
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from mvdistill.core.config import AttentionMode, ExperimentConfig, Shading, config_hash
from mvdistill.core.errors import ConfigError, ContractViolation
from mvdistill.core.logging import get_logger
from mvdistill.data.repository import write_png
from mvdistill.data.synth import rasterize_view
from mvdistill.diffusion.sampler import sample_views
from mvdistill.diffusion.schedule import forward_diffuse, schedule_from_config
from mvdistill.distill.loop import distill
from mvdistill.distill.render import compute_weights, render, render_to_image
from mvdistill.distill.sds import anneal_window, lambda_o, sds_grad
from mvdistill.eval.metrics import cosine_similarity, psnr, silhouette_iou
from mvdistill.eval.oracle import OracleDenoiser
from mvdistill.geometry.camera import fixed_view_set, relative_pose
from mvdistill.models.checkpoint import LoadedCheckpoint, init_denoiser_config
from mvdistill.models.codec import LatentCodec
from mvdistill.models.denoiser import MultiViewDenoiser
from mvdistill.schemas.models import EvalReport, Primitive, ThresholdCheck, ToyObject
from mvdistill.training.batches import PreparedObject, orthogonal_indices
from mvdistill.training.trainer import train

logger = get_logger(__name__)

DEFAULT_THRESHOLDS = Path(__file__).with_name("thresholds.json")
ABLATION_EXCLUDE = ("denoiser.attention_mode",)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Thresholds
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def load_thresholds(path: Optional[Path] = None) -> List[ThresholdCheck]:
    path = Path(path) if path is not None else DEFAULT_THRESHOLDS
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read thresholds {path}: {exc}", {"path": str(path)}) from exc
    return [ThresholdCheck.model_validate(item) for item in data["thresholds"]]


def _passes(value: float, comparator: str, threshold: float) -> bool:
    if comparator == ">=":
        return value >= threshold
    if comparator == "<=":
        return value <= threshold
    return value == threshold


def apply_thresholds(report: EvalReport, thresholds: Sequence[ThresholdCheck]) -> EvalReport:
    """Attach a check for every threshold whose metric the report carries."""
    checks = []
    for template in thresholds:
        if template.metric not in report.metrics:
            continue
        value = report.metrics[template.metric]
        checks.append(
            template.model_copy(
                update={"value": value, "passed": _passes(value, template.comparator, template.threshold)}
            )
        )
    return report.model_copy(update={"checks": checks})


def _metadata(config: ExperimentConfig, **extra) -> Dict[str, object]:
    return {"seed": config.seed, "config_hash": config_hash(config), **extra}


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Suites
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def run_units_suite(config: ExperimentConfig, **_) -> EvalReport:
    rng = np.random.default_rng(config.substream("eval"))
    defaults = ExperimentConfig()
    metrics: Dict[str, float] = {
        "lambda_o_2500": lambda_o(2500),
        "lambda_o_5000": lambda_o(5000),
        "lambda_o_9000": lambda_o(9000),
        "anneal_t_min_0": anneal_window(0, defaults.distill)[0],
        "anneal_t_max_0": anneal_window(0, defaults.distill)[1],
        "anneal_t_max_8000": anneal_window(8000, defaults.distill)[1],
        "default_guidance_scale": defaults.distill.guidance_scale,
        "default_lambda_e": defaults.distill.lambda_e,
        "default_camera_distance": defaults.camera.distance,
        "default_elevation_min_deg": defaults.camera.elevation_min_deg,
        "default_elevation_max_deg": defaults.camera.elevation_max_deg,
        "default_fixed_elevation_deg": defaults.camera.fixed_elevation_deg,
        "default_views_per_object": float(defaults.camera.views_per_object),
        "default_branch_p_single": defaults.stage1.branch_p_single,
    }

    schedule = schedule_from_config(config.schedule)
    z = torch.from_numpy(rng.standard_normal((4, 3, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal((4, 3, 8, 8)))
    metrics["forward_diffuse_t0_max_err"] = float((forward_diffuse(z, 0, eps, schedule) - z).abs().max())

    sigma = torch.from_numpy(rng.exponential(scale=20.0, size=(10_000, 64)))
    weights = compute_weights(sigma, torch.full_like(sigma, 2.0 / 64))
    metrics["weight_sum_max_excess"] = max(0.0, float(weights.sum(dim=-1).max()) - 1.0)
    metrics["weight_min"] = float(weights.min())
    return EvalReport(suite="units", metrics=metrics, metadata=_metadata(config))


def toy_sphere() -> ToyObject:
    return ToyObject(
        object_id="oracle_sphere",
        primitives=[Primitive(shape="sphere", center=(0.0, 0.0, 0.0), half_extent=0.3, albedo=(0.8, 0.4, 0.2))],
    )


def run_oracle_suite(config: ExperimentConfig, **_) -> EvalReport:
    """Distil a toy sphere against the oracle for its four orthogonal fixed views."""
    resolution = config.eval.oracle_resolution
    schedule = schedule_from_config(config.schedule)
    codec = LatentCodec(config.codec.model_copy(update={"pool_factor": 1}))
    poses = fixed_view_set(4, config.camera)
    truth = [rasterize_view(toy_sphere(), p, resolution, math.radians(config.camera.fov_y_deg)).image for p in poses]
    targets = codec.encode_latent(np.stack(truth).astype(np.float32))
    oracle = OracleDenoiser(targets, schedule)

    # closed-form gradient identity in double precision
    gen = torch.Generator().manual_seed(config.substream_seed("eval"))
    z = torch.rand(targets.shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0
    oracle64 = OracleDenoiser(targets.double(), schedule)
    identity_err = 0.0
    for t in (20, 250, 500, 750, 980):
        result = sds_grad(
            oracle64, schedule, z, torch.zeros(4, dtype=torch.float64), torch.zeros(4, 3), (t, t), 10.0, gen
        )
        a = float(schedule.alpha_bar[t])
        expected = math.sqrt(a) / math.sqrt(1.0 - a) * (z - targets.double())
        identity_err = max(identity_err, float((result.grad - expected).abs().max()))

    distill_config = config.distill.model_copy(
        update={
            "steps": config.eval.oracle_steps,
            "render_resolution": resolution,
            "shading": Shading.LAMBERTIAN_POINT_LIGHT,
            "light_jitter": 0.0,
            "use_reference_slot": False,
            "seed": config.substream_seed("distill"),
        }
    )
    result = distill(
        oracle,
        torch.zeros(config.codec.D_emb),
        distill_config,
        schedule=schedule,
        codec=codec,
        camera=config.camera,
        pose_sampler=lambda rng, n: list(poses),
    )

    scores = []
    with torch.no_grad():
        for pose, gt in zip(poses, truth):
            out = render(
                result.field,
                pose,
                resolution,
                Shading.LAMBERTIAN_POINT_LIGHT,
                samples_per_ray=distill_config.samples_per_ray,
                stratified=False,
                fov_y=math.radians(config.camera.fov_y_deg),
            )
            scores.append(psnr(render_to_image(out), gt))

    metrics = {"oracle_grad_identity_max_err": identity_err, "oracle_psnr_min_db": min(scores)}
    metrics.update({f"oracle_psnr_view{k}_db": s for k, s in enumerate(scores)})
    return EvalReport(
        suite="oracle",
        metrics=metrics,
        metadata=_metadata(config, field_digest=result.digest, steps=distill_config.steps),
    )


def _grid(rows: List[List[np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)


def run_ablation_ema(
    objects: Sequence[PreparedObject],
    base: LoadedCheckpoint,
    config: ExperimentConfig,
    seeds: Sequence[int] = (0,),
    out_dir: Optional[Path] = None,
) -> EvalReport:
    """
    Fine-tune two stage-2 variants from the same stage-1 parameters, one per
    attention mode, and compare samples of held-in objects. No ordering of the
    variants is asserted.
    """
    stage2 = config.stage2.model_copy(update={"steps": config.eval.ablation_steps})
    eval_objects = list(objects[: config.eval.n_eval_objects])
    init = {k: v.clone() for k, v in base.denoiser.state_dict().items()}
    metrics: Dict[str, float] = {}
    hashes: Dict[str, str] = {}
    artifacts: List[str] = []

    for mode in AttentionMode:
        variant = config.model_copy(deep=True)
        variant.denoiser = init_denoiser_config(
            variant.denoiser.model_copy(update={"attention_mode": mode}), base.denoiser.config
        )
        hashes[mode.value] = config_hash(variant, exclude=ABLATION_EXCLUDE)
        ious, sims, rows = [], [], []
        for seed in seeds:
            model = MultiViewDenoiser(
                variant.denoiser, base.denoiser.embedding_dim, num_timesteps=base.schedule.T, seed=seed
            )
            train(
                stage2.model_copy(update={"seed": seed}),
                objects,
                model,
                base.schedule,
                encoder=base.encoder,
                codec=base.codec,
                init_params=init,
            )
            model.eval()
            for obj in eval_objects:
                idx = orthogonal_indices(len(obj.fixed_poses), 0)
                poses = [relative_pose(obj.random_poses[0], obj.fixed_poses[i]) for i in idx]
                resolution = obj.fixed_latents.shape[-1] * base.codec.pool_factor
                images = sample_views(
                    model,
                    obj.random_embeddings[0],
                    poses,
                    base.schedule,
                    codec=base.codec,
                    resolution=resolution,
                    scale=config.sampler.scale,
                    steps=config.sampler.steps,
                    generator=torch.Generator().manual_seed(seed),
                    deterministic=True,
                )
                truth = base.codec.decode_latent(obj.fixed_latents[idx]).numpy()
                ious += [silhouette_iou(img, gt, config.eval.silhouette_threshold) for img, gt in zip(images, truth)]
                embedded = base.encoder.encode_embedding(np.stack(images).astype(np.float32))
                sims += [cosine_similarity(e, obj.random_embeddings[0]) for e in embedded]
                rows.append(images)
        metrics[f"{mode.value}_silhouette_iou"] = float(np.mean(ious))
        metrics[f"{mode.value}_reference_similarity"] = float(np.mean(sims))
        if out_dir is not None:
            path = Path(out_dir) / f"grid_{mode.value}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_png(path, _grid(rows))
            artifacts.append(path.name)
        logger.info("ablation_variant_done", mode=mode.value, **{k: v for k, v in metrics.items() if mode.value in k})

    metrics["ablation_hash_match"] = float(len(set(hashes.values())) == 1)
    return EvalReport(
        suite="ablation",
        metrics=metrics,
        metadata=_metadata(config, seeds=list(seeds), variant_hashes=hashes, steps=stage2.steps),
        artifacts=artifacts,
    )


def _ablation_suite(
    config: ExperimentConfig,
    objects: Optional[Sequence[PreparedObject]] = None,
    checkpoint: Optional[LoadedCheckpoint] = None,
    out_dir: Optional[Path] = None,
    **_,
) -> EvalReport:
    if objects is None or checkpoint is None:
        raise ContractViolation("the ablation suite needs a dataset and a stage-1 checkpoint", component="eval")
    return run_ablation_ema(objects, checkpoint, config, seeds=(config.seed,), out_dir=out_dir)


SUITES: Dict[str, Callable[..., EvalReport]] = {
    "units": run_units_suite,
    "oracle": run_oracle_suite,
    "ablation": _ablation_suite,
}


def run_suite(name: str, config: ExperimentConfig, **kwargs) -> EvalReport:
    handler = SUITES.get(name)
    if handler is None:
        raise ContractViolation(f"unknown suite '{name}', available: {sorted(SUITES)}", component="eval")
    logger.info("eval_started", suite=name)
    report = apply_thresholds(handler(config, **kwargs), load_thresholds(config.eval.thresholds_path))
    logger.info("eval_finished", suite=name, passed=report.passed, n_checks=len(report.checks))
    return report
