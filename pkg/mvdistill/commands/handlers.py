"""
mvdistill: Command Handlers

Thin argparse adapters over the pipeline stages. Each handler folds its flags
into the resolved config, then hands off to mvdistill.orchestrator.pipeline.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from mvdistill.commands.registry import CommandResult, arg, register_command
from mvdistill.core.config import ExperimentConfig, Stage
from mvdistill.eval.evaluator import SUITES
from mvdistill.orchestrator import pipeline


def _update(config: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    """Copy of `config` with the non-None values set on one section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    data = config.model_dump(mode="json")
    data[section].update(values)
    return ExperimentConfig.model_validate(data)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Data & Training
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def build_dataset_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    config = _update(config, "dataset", n_objects=args.n_objects, resolution=args.resolution)
    return pipeline.run_build_dataset(config, args.out)


register_command(
    name="build-dataset",
    description="Render the procedural multi-view dataset",
    handler=build_dataset_command,
    arguments=[
        arg("--out", type=Path, required=True, help="dataset root"),
        arg("--n-objects", type=int, default=None),
        arg("--resolution", type=int, default=None, choices=(32, 64, 128)),
    ],
)


def train_stage1_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    return pipeline.run_train(config, Stage.STAGE1, args.dataset, args.out, resume=args.resume)


register_command(
    name="train-stage1",
    description="Train the multi-view denoiser on target views only",
    handler=train_stage1_command,
    arguments=[
        arg("--dataset", type=Path, required=True),
        arg("--out", type=Path, required=True),
        arg("--resume", type=Path, default=None, help="checkpoint with train state"),
    ],
)


def train_stage2_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    return pipeline.run_train(config, Stage.STAGE2, args.dataset, args.out, init=args.init, resume=args.resume)


register_command(
    name="train-stage2",
    description="Fine-tune a stage-1 denoiser with a noise-free reference slot",
    handler=train_stage2_command,
    arguments=[
        arg("--init", type=Path, required=True, help="stage-1 checkpoint"),
        arg("--dataset", type=Path, required=True),
        arg("--out", type=Path, required=True),
        arg("--resume", type=Path, default=None),
    ],
)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Inference
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def sample_views_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    config = _update(
        config,
        "sampler",
        scale=args.scale,
        steps=args.steps,
        deterministic=args.deterministic or None,
        seed=args.seed,
    )
    return pipeline.run_sample_views(
        config,
        args.ckpt,
        args.image,
        args.out,
        poses_deg=args.poses,
        use_reference_slot=args.reference_slot,
    )


register_command(
    name="sample-views",
    description="Sample views of one object from its image embedding",
    handler=sample_views_command,
    arguments=[
        arg("--ckpt", type=Path, required=True),
        arg("--image", type=Path, required=True, help="reference image; only its embedding is used"),
        arg("--out", type=Path, required=True),
        arg("--scale", type=float, default=None, help="guidance scale (default 10)"),
        arg("--steps", type=int, default=None),
        arg("--seed", type=int, default=None),
        arg("--poses", nargs="+", default=None, metavar="DELEV,DAZIM", help="relative poses in degrees"),
        arg("--deterministic", action="store_true"),
        arg("--reference-slot", action="store_true", help="sample a zero-pose view first and condition on it"),
    ],
)


def distill_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    config = _update(config, "distill", steps=args.steps, guidance_scale=args.scale, seed=args.seed)
    return pipeline.run_distill(config, args.ckpt, args.image, args.out)


register_command(
    name="distill",
    description="Optimise a radiance field by score distillation",
    handler=distill_command,
    arguments=[
        arg("--ckpt", type=Path, required=True),
        arg("--image", type=Path, required=True, help="reference image; only its embedding is used"),
        arg("--out", type=Path, required=True),
        arg("--steps", type=int, default=None),
        arg("--scale", type=float, default=None),
        arg("--seed", type=int, default=None),
    ],
)


def render_turntable_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    return pipeline.run_render_turntable(config, args.field, args.out, args.frames, args.resolution)


register_command(
    name="render-turntable",
    description="Render numbered turntable frames and a six-view grid of a field",
    handler=render_turntable_command,
    arguments=[
        arg("--field", type=Path, required=True),
        arg("--out", type=Path, required=True),
        arg("--frames", type=int, default=36),
        arg("--resolution", type=int, default=64),
    ],
)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Evaluation
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def eval_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    return pipeline.run_eval(config, args.suite, args.out, dataset=args.dataset, checkpoint=args.ckpt)


register_command(
    name="eval",
    description="Run an evaluation suite against the versioned thresholds",
    handler=eval_command,
    arguments=[
        arg("--suite", required=True, choices=sorted(SUITES)),
        arg("--out", type=Path, required=True, help="report path, e.g. out/report.json"),
        arg("--dataset", type=Path, default=None, help="ablation only"),
        arg("--ckpt", type=Path, default=None, help="ablation only: stage-1 checkpoint"),
    ],
)


def smoke_command(config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    return pipeline.run_smoke(config, args.out, argv=args.argv)


register_command(
    name="smoke",
    description="Run every stage end to end with a tiny config",
    handler=smoke_command,
    arguments=[arg("--out", type=Path, required=True)],
)
