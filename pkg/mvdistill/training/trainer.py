"""
mvdistill: Two-stage Trainer

Stage 1 minimises the multi-view epsilon-MSE; stage 2 fine-tunes the full
network on reference-conditioned batches. One optimizer owns the parameters.
The random stream of every optimizer step is derived from (seed, stage, step),
so a run resumed from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from mvdistill.core.config import LrSchedule, Stage, TrainConfig
from mvdistill.core.errors import ContractViolation, NonFiniteLossError
from mvdistill.core.logging import get_logger
from mvdistill.diffusion.losses import loss_ema, loss_mv
from mvdistill.diffusion.schedule import NoiseSchedule
from mvdistill.models.checkpoint import save_checkpoint
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import MultiViewDenoiser
from mvdistill.training.batches import PreparedObject, make_stage1_batch, make_stage2_batch
from mvdistill.training.memory import LossHistory

logger = get_logger(__name__)

FINAL_CHECKPOINT = "model.pt"
NAN_SNAPSHOT = "nan_snapshot.pt"
_STAGE_INDEX = {Stage.STAGE1: 1, Stage.STAGE2: 2}


@dataclass
class TrainState:
    model: MultiViewDenoiser
    optimizer: torch.optim.Optimizer
    stage: Stage
    seed: int
    global_step: int = 0
    history: LossHistory = field(default_factory=LossHistory)
    losses: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    def state_dict(self) -> Dict[str, Any]:
        """Everything beyond the parameters that resuming needs."""
        return {
            "stage": self.stage.value,
            "seed": self.seed,
            "global_step": self.global_step,
            "optimizer": self.optimizer.state_dict(),
            "history": self.history.state_dict(),
        }


def lr_at(config: TrainConfig, step: int) -> float:
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}", component="trainer")
    warmup = config.effective_warmup_steps
    peak = config.lr_peak
    if step < warmup:
        return peak * step / warmup
    if config.lr_schedule == LrSchedule.CONSTANT_WITH_WARMUP:
        return peak
    decay = config.steps - warmup
    if decay <= 0:
        return peak if step == warmup else 0.0
    return peak * max(0.0, (config.steps - step) / decay)


def step_rng(seed: int, stage: Stage, step: int, micro: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_INDEX[stage], step, micro]))


def make_optimizer(model: MultiViewDenoiser, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr_peak, betas=tuple(config.adam_betas), weight_decay=config.weight_decay
    )


def _load_init(model: MultiViewDenoiser, init_params: Dict[str, torch.Tensor]) -> None:
    result = model.load_state_dict(init_params, strict=False)
    if result.missing_keys or result.unexpected_keys:
        raise ContractViolation(
            "init parameters do not match the denoiser",
            {"missing": result.missing_keys, "unexpected": result.unexpected_keys},
            component="trainer",
        )


def train(
    config: TrainConfig,
    objects: Sequence[PreparedObject],
    model: MultiViewDenoiser,
    schedule: NoiseSchedule,
    *,
    encoder: EmbeddingEncoder,
    codec: LatentCodec,
    out_dir: Optional[Path] = None,
    init_params: Optional[Dict[str, torch.Tensor]] = None,
    resume_state: Optional[Dict[str, Any]] = None,
) -> TrainState:
    """
    Run `config.steps` optimizer steps (minus those already done when resuming).

    Stage 2 requires `init_params` (a stage-1 state dict) unless resuming. The
    model is trained in full; the embedding encoder stays frozen and outside
    the optimizer.
    """
    if config.stage == Stage.STAGE2 and init_params is None and resume_state is None:
        raise ContractViolation("stage 2 must start from stage-1 parameters", component="trainer")
    if init_params is not None and resume_state is None:
        _load_init(model, init_params)

    model.train()
    optimizer = make_optimizer(model, config)
    state = TrainState(
        model=model,
        optimizer=optimizer,
        stage=config.stage,
        seed=config.seed,
        history=LossHistory(config.history_size),
    )
    if resume_state is not None:
        if Stage(resume_state["stage"]) != config.stage:
            raise ContractViolation("resume state belongs to another stage", component="trainer")
        optimizer.load_state_dict(resume_state["optimizer"])
        state.global_step = int(resume_state["global_step"])
        state.seed = int(resume_state["seed"])
        state.history = LossHistory.from_state_dict(resume_state["history"])

    objective = loss_mv if config.stage == Stage.STAGE1 else loss_ema
    make_batch = make_stage1_batch if config.stage == Stage.STAGE1 else make_stage2_batch
    out_dir = Path(out_dir) if out_dir is not None else None

    def checkpoint(name: str) -> Path:
        path = save_checkpoint(out_dir / name, model, encoder, codec, schedule, train_state=state.state_dict())
        state.checkpoints.append(path)
        return path

    logger.info("train_started", stage=config.stage.value, steps=config.steps, start=state.global_step)
    while state.global_step < config.steps:
        step = state.global_step
        lr = lr_at(config, step + 1)
        for group in optimizer.param_groups:
            group["lr"] = lr

        optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for micro in range(config.grad_accum):
            branch, batch = make_batch(objects, step_rng(state.seed, config.stage, step, micro), config, schedule.T)
            loss = objective(model, batch, schedule)
            if not torch.isfinite(loss):
                logger.error("non_finite_loss", step=step, branch=branch.value, loss=float(loss))
                if out_dir is not None:
                    checkpoint(NAN_SNAPSHOT)
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}",
                    {"step": step, "branch": branch.value, "lr": lr},
                )
            (loss / config.grad_accum).backward()
            total += float(loss) / config.grad_accum
        optimizer.step()

        state.global_step = step + 1
        state.losses.append(total)
        state.history.add(step, total)
        if state.global_step % config.log_every == 0:
            logger.info(
                "train_step",
                stage=config.stage.value,
                step=state.global_step,
                loss=round(total, 6),
                smoothed=round(state.history.smoothed() or 0.0, 6),
                lr=lr,
            )
        if out_dir is not None and state.global_step % config.checkpoint_every == 0:
            checkpoint(f"step_{state.global_step:06d}.pt")

    if out_dir is not None:
        checkpoint(FINAL_CHECKPOINT)
    logger.info("train_finished", stage=config.stage.value, steps=state.global_step)
    return state
