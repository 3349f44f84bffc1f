import math

import numpy as np
import pytest
import torch

from mvdistill.core.config import (
    AttentionMode,
    ExperimentConfig,
    LrSchedule,
    Stage,
    Stage1Config,
    Stage2Config,
    TrainConfig,
)
from mvdistill.core.errors import CheckpointError, ContractViolation, NonFiniteLossError
from mvdistill.data.repository import load_dataset
from mvdistill.data.synth import build_dataset
from mvdistill.diffusion.schedule import schedule_from_config
from mvdistill.models.checkpoint import init_denoiser_config, load_checkpoint, save_checkpoint
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import Branch, MultiViewDenoiser
from mvdistill.orchestrator.pipeline import run_train
from mvdistill.training.batches import make_stage1_batch, make_stage2_batch, orthogonal_indices, prepare_objects
from mvdistill.training.memory import LossHistory
from mvdistill.training.trainer import FINAL_CHECKPOINT, NAN_SNAPSHOT, lr_at, step_rng, train


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Learning rate
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_constant_schedule_warms_up_linearly():
    config = Stage1Config(warmup_steps=100, warmup_scale=1.0, lr_peak=1e-4, steps=1000)
    assert lr_at(config, 0) == 0.0
    assert lr_at(config, 50) == pytest.approx(5e-5)
    assert lr_at(config, 100) == pytest.approx(1e-4)
    assert lr_at(config, 900) == pytest.approx(1e-4)


def test_linear_peak_decays_to_zero():
    config = Stage2Config(warmup_steps=10, warmup_scale=1.0, lr_peak=5e-5, steps=100)
    assert config.lr_schedule == LrSchedule.LINEAR_PEAK
    assert lr_at(config, 10) == pytest.approx(5e-5)
    assert lr_at(config, 55) == pytest.approx(5e-5 * 45 / 90)
    assert lr_at(config, 100) == 0.0


def test_desk_warmup_is_scaled():
    assert Stage1Config().effective_warmup_steps == 200
    assert TrainConfig.full_scale(Stage.STAGE1).effective_warmup_steps == 10000
    assert TrainConfig.full_scale(Stage.STAGE2).steps == 5000


def test_negative_step_is_rejected():
    with pytest.raises(ContractViolation):
        lr_at(Stage1Config(), -1)


def test_step_streams_are_independent_of_history():
    a = step_rng(0, Stage.STAGE1, 7).random(3)
    step_rng(0, Stage.STAGE1, 6).random(100)
    b = step_rng(0, Stage.STAGE1, 7).random(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, step_rng(0, Stage.STAGE2, 7).random(3))


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Batches
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_orthogonal_indices():
    assert orthogonal_indices(16, 5) == [1, 5, 9, 13]
    assert orthogonal_indices(8, 0) == [0, 2, 4, 6]
    with pytest.raises(ContractViolation):
        orthogonal_indices(6, 0)


def test_multi_view_batch_uses_four_orthogonal_fixed_views(tiny_objects):
    config = Stage1Config(branch_p_single=0.0, batch_objects=3)
    branch, batch = make_stage1_batch(tiny_objects, np.random.default_rng(0), config, 1000)
    assert branch == Branch.MULTI_VIEW
    assert batch.latents.shape == (3, 4, 3, 8, 8)
    azimuths = batch.condition.poses[..., 1]
    gaps = torch.remainder(azimuths[:, 1:] - azimuths[:, :-1], 2 * math.pi)
    torch.testing.assert_close(gaps, torch.full_like(gaps, math.pi / 2), atol=1e-5, rtol=0)
    assert batch.timesteps.min() >= 1 and batch.timesteps.max() <= 1000


def test_single_view_batch_never_targets_the_reference(tiny_objects):
    config = Stage1Config(branch_p_single=1.0, batch_objects=4)
    for seed in range(10):
        branch, batch = make_stage2_batch(tiny_objects, np.random.default_rng(seed), config, 1000)
        assert branch == Branch.SINGLE_VIEW
        assert batch.targets.latents.shape[1] == 1
        for b in range(4):
            assert not torch.equal(batch.reference_latent[b], batch.targets.latents[b, 0])


def test_batches_are_a_pure_function_of_the_stream(tiny_objects):
    config = Stage1Config(batch_objects=2)
    _, a = make_stage1_batch(tiny_objects, step_rng(1, Stage.STAGE1, 3), config, 1000)
    _, b = make_stage1_batch(tiny_objects, step_rng(1, Stage.STAGE1, 3), config, 1000)
    assert torch.equal(a.latents, b.latents) and torch.equal(a.noises, b.noises)
    assert torch.equal(a.timesteps, b.timesteps)


def test_empty_dataset():
    with pytest.raises(ContractViolation):
        make_stage1_batch([], np.random.default_rng(0), Stage1Config(), 1000)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Trainer
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def _stage1(steps=4, **kwargs):
    return Stage1Config(steps=steps, batch_objects=2, log_every=1, checkpoint_every=2, **kwargs)


def test_stage1_trains_and_checkpoints(tmp_path, tiny_objects, tiny_denoiser, schedule, encoder, codec):
    state = train(_stage1(), tiny_objects, tiny_denoiser, schedule, encoder=encoder, codec=codec, out_dir=tmp_path)
    assert state.global_step == 4
    assert all(math.isfinite(v) for v in state.losses)
    assert len(state.history) == 4
    names = sorted(p.name for p in state.checkpoints)
    assert names == [FINAL_CHECKPOINT, "step_000002.pt", "step_000004.pt"]
    assert load_checkpoint(tmp_path / FINAL_CHECKPOINT).train_state["global_step"] == 4


def test_resume_replays_the_uninterrupted_run(tmp_path, tiny_objects, tiny_denoiser_config, schedule, encoder, codec):
    full = MultiViewDenoiser(tiny_denoiser_config, 16, seed=1)
    train(_stage1(), tiny_objects, full, schedule, encoder=encoder, codec=codec, out_dir=tmp_path / "full")

    snapshot = load_checkpoint(tmp_path / "full" / "step_000002.pt")
    resumed = train(
        _stage1(),
        tiny_objects,
        snapshot.denoiser,
        schedule,
        encoder=encoder,
        codec=codec,
        resume_state=snapshot.train_state,
    )
    assert resumed.global_step == 4
    for name, tensor in full.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[name], tensor), name


def test_grad_accumulation_runs(tiny_objects, tiny_denoiser, schedule, encoder, codec):
    state = train(_stage1(steps=2, grad_accum=2), tiny_objects, tiny_denoiser, schedule, encoder=encoder, codec=codec)
    assert state.global_step == 2


def test_stage2_needs_stage1_parameters(tiny_objects, tiny_denoiser, schedule, encoder, codec):
    with pytest.raises(ContractViolation):
        train(Stage2Config(steps=1), tiny_objects, tiny_denoiser, schedule, encoder=encoder, codec=codec)


def test_stage2_fine_tunes_from_stage1(tiny_objects, tiny_denoiser_config, schedule, encoder, codec):
    base = MultiViewDenoiser(tiny_denoiser_config, 16, seed=2)
    init = {k: v.clone() for k, v in base.state_dict().items()}
    model = MultiViewDenoiser(tiny_denoiser_config, 16, seed=9)
    state = train(
        Stage2Config(steps=2, batch_objects=2, log_every=1),
        tiny_objects,
        model,
        schedule,
        encoder=encoder,
        codec=codec,
        init_params=init,
    )
    assert state.global_step == 2
    assert all(math.isfinite(v) for v in state.losses)
    # the encoder never joins the optimizer
    assert all(not p.requires_grad for p in encoder.parameters())


def test_non_finite_loss_writes_a_snapshot(tmp_path, tiny_objects, tiny_denoiser, schedule, encoder, codec):
    with torch.no_grad():
        tiny_denoiser.conv_out.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        train(_stage1(), tiny_objects, tiny_denoiser, schedule, encoder=encoder, codec=codec, out_dir=tmp_path)
    assert (tmp_path / NAN_SNAPSHOT).exists()


def test_fine_tune_keeps_the_checkpoint_architecture(tiny_denoiser_config):
    requested = tiny_denoiser_config.model_copy(update={"attention_mode": AttentionMode.PLAIN_MULTIVIEW})
    built = init_denoiser_config(requested, tiny_denoiser_config)
    assert built.attention_mode == AttentionMode.PLAIN_MULTIVIEW
    assert built.channels == tiny_denoiser_config.channels

    wider = tiny_denoiser_config.model_copy(update={"base_channels": 16})
    with pytest.raises(CheckpointError) as info:
        init_denoiser_config(wider, tiny_denoiser_config)
    assert info.value.payload["keys"] == ["base_channels"]


def test_stage2_rejects_a_mismatched_init(
    tmp_path, tiny_dataset, tiny_denoiser, codec_config, encoder, codec, schedule
):
    init = save_checkpoint(tmp_path / "stage1.pt", tiny_denoiser, encoder, codec, schedule)
    config = ExperimentConfig(codec=codec_config)
    with pytest.raises(CheckpointError):
        run_train(config, Stage.STAGE2, tiny_dataset, tmp_path / "stage2", init=init)
    assert not (tmp_path / "stage2" / FINAL_CHECKPOINT).exists()


def test_stage2_reports_the_config_it_ran(
    tmp_path, tiny_dataset, tiny_denoiser, tiny_experiment, encoder, codec, schedule
):
    init = save_checkpoint(tmp_path / "stage1.pt", tiny_denoiser, encoder, codec, schedule)
    result = run_train(tiny_experiment, Stage.STAGE2, tiny_dataset, tmp_path / "stage2", init=init)
    assert result.config.denoiser == tiny_denoiser.config
    assert result.summary["steps"] == tiny_experiment.stage2.steps
    assert (tmp_path / "stage2" / FINAL_CHECKPOINT).exists()


@pytest.mark.slow
def test_both_stages_halve_the_smoothed_loss(tmp_path):
    config = ExperimentConfig()
    build_dataset(config.dataset.n_objects, config.seed, tmp_path, resolution=config.dataset.resolution)
    codec, encoder = LatentCodec(config.codec), EmbeddingEncoder(config.codec)
    schedule = schedule_from_config(config.schedule)
    objects = prepare_objects(load_dataset(tmp_path), codec, encoder)

    model = MultiViewDenoiser(config.denoiser, config.codec.D_emb, seed=config.seed)
    stage1 = train(config.stage1, objects, model, schedule, encoder=encoder, codec=codec)
    init = {k: v.clone() for k, v in model.state_dict().items()}
    stage2 = train(
        config.stage2,
        objects,
        MultiViewDenoiser(config.denoiser, config.codec.D_emb, seed=config.seed),
        schedule,
        encoder=encoder,
        codec=codec,
        init_params=init,
    )
    for state in (stage1, stage2):
        baseline = float(np.mean(state.losses[50:100]))
        final = float(np.mean(state.losses[-50:]))
        assert final <= 0.5 * baseline, (state.stage, baseline, final)


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Loss history
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_loss_history_evicts_oldest():
    history = LossHistory(max_items=3)
    assert history.smoothed() is None
    for step, loss in enumerate([4.0, 3.0, 2.0, 1.0]):
        history.add(step, loss)
    assert len(history) == 3
    assert [item["step"] for item in history.recent(5)] == [1, 2, 3]
    assert history.smoothed() == pytest.approx(2.0)
    assert history.smoothed(window=2) == pytest.approx(1.5)

    restored = LossHistory.from_state_dict(history.state_dict())
    assert restored.recent(3) == history.recent(3)
    history.clear()
    assert len(history) == 0 and len(restored) == 3
