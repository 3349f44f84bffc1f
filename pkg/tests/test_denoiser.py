import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from mvdistill.core.config import AttentionMode, DenoiserConfig
from mvdistill.core.errors import CheckpointError, ContractViolation, SequenceTooLongError
from mvdistill.diffusion.losses import ConditionBundle, DiffusionBatch, EMABatch, loss_ema, loss_mv
from mvdistill.diffusion.schedule import make_schedule
from mvdistill.geometry.camera import RelativePose
from mvdistill.models.checkpoint import load_checkpoint, save_checkpoint
from mvdistill.models.denoiser import (
    Branch,
    MultiViewDenoiser,
    SlotMeta,
    assemble_ema_sequence,
    branch_selector,
    camera_features,
    predict_noise,
    timestep_features,
)


def _inputs(batch=2, slots=4, dtype=torch.float64, seed=0, size=8):
    gen = torch.Generator().manual_seed(seed)
    latents = torch.randn(batch, slots, 3, size, size, generator=gen, dtype=dtype)
    timesteps = torch.randint(1, 1001, (batch, slots), generator=gen)
    poses = torch.rand(batch, slots, 3, generator=gen, dtype=dtype)
    poses[..., 2] = 1.5
    embedding = torch.randn(batch, 16, generator=gen, dtype=dtype)
    return latents, timesteps, poses, embedding


def test_prediction_has_latent_shape(tiny_denoiser):
    latents, timesteps, poses, embedding = _inputs(dtype=torch.float32)
    out = tiny_denoiser(latents, timesteps, poses, embedding)
    assert out.shape == latents.shape
    assert torch.isfinite(out).all()


def test_two_level_unet_runs(codec_config):
    config = DenoiserConfig(base_channels=8, depth=2, attn_heads=2, time_embed_dim=16, camera_embed_dim=16)
    model = MultiViewDenoiser(config, codec_config.D_emb)
    latents, timesteps, poses, embedding = _inputs(batch=1, dtype=torch.float32)
    assert model(latents, timesteps, poses, embedding).shape == latents.shape


def test_odd_latents_are_rejected_for_deep_unets(codec_config):
    config = DenoiserConfig(base_channels=8, depth=2, attn_heads=2, time_embed_dim=16, camera_embed_dim=16)
    model = MultiViewDenoiser(config, codec_config.D_emb)
    latents, timesteps, poses, embedding = _inputs(batch=1, dtype=torch.float32, size=7)
    with pytest.raises(ContractViolation):
        model(latents, timesteps, poses, embedding)


@pytest.mark.parametrize("seed", range(20))
def test_target_slots_are_permutation_equivariant(tiny_denoiser, seed):
    model = tiny_denoiser.double().eval()
    latents, timesteps, poses, embedding = _inputs(seed=seed)
    perm = torch.randperm(4, generator=torch.Generator().manual_seed(seed + 10))
    out = model(latents, timesteps, poses, embedding)
    out_perm = model(latents[:, perm], timesteps[:, perm], poses[:, perm], embedding)
    torch.testing.assert_close(out_perm, out[:, perm], atol=1e-10, rtol=1e-9)


def test_views_actually_interact(tiny_denoiser):
    model = tiny_denoiser.double().eval()
    latents, timesteps, poses, embedding = _inputs(batch=1)
    out = model(latents, timesteps, poses, embedding)
    changed = latents.clone()
    changed[:, 3] += 1.0
    out_changed = model(changed, timesteps, poses, embedding)
    assert not torch.allclose(out[:, 0], out_changed[:, 0])


def test_sequence_longer_than_max_views(tiny_denoiser):
    latents, timesteps, poses, embedding = _inputs(slots=6, dtype=torch.float32)
    with pytest.raises(SequenceTooLongError):
        tiny_denoiser(latents, timesteps, poses, embedding)


def test_reference_slot_must_carry_timestep_zero(tiny_denoiser):
    latents, timesteps, poses, embedding = _inputs(slots=5, dtype=torch.float32)
    is_reference = torch.tensor([True, False, False, False, False])
    with pytest.raises(ContractViolation):
        tiny_denoiser(latents, timesteps, poses, embedding, is_reference=is_reference)


def test_plain_multiview_ignores_the_reference(tiny_denoiser_config, codec_config):
    config = tiny_denoiser_config.model_copy(update={"attention_mode": AttentionMode.PLAIN_MULTIVIEW})
    model = MultiViewDenoiser(config, codec_config.D_emb).double().eval()
    latents, timesteps, poses, embedding = _inputs(batch=1, slots=5)
    timesteps[:, 0] = 0
    poses[:, 0, :2] = 0
    is_reference = torch.tensor([True, False, False, False, False])

    joint = model(latents, timesteps, poses, embedding, is_reference=is_reference)
    alone = model(latents[:, 1:], timesteps[:, 1:], poses[:, 1:], embedding)
    torch.testing.assert_close(joint[:, 1:], alone, atol=1e-10, rtol=1e-9)

    other = latents.clone()
    other[:, 0] = torch.randn_like(other[:, 0])
    moved = model(other, timesteps, poses, embedding, is_reference=is_reference)
    torch.testing.assert_close(moved[:, 1:], joint[:, 1:], atol=1e-10, rtol=1e-9)


def test_ema_joint_lets_targets_see_the_reference(tiny_denoiser):
    model = tiny_denoiser.double().eval()
    latents, timesteps, poses, embedding = _inputs(batch=1, slots=5)
    timesteps[:, 0] = 0
    poses[:, 0, :2] = 0
    is_reference = torch.tensor([True, False, False, False, False])
    joint = model(latents, timesteps, poses, embedding, is_reference=is_reference)
    other = latents.clone()
    other[:, 0] += 1.0
    moved = model(other, timesteps, poses, embedding, is_reference=is_reference)
    assert not torch.allclose(moved[:, 1:], joint[:, 1:])


def _ema_batch(seed: int = 0) -> EMABatch:
    gen = torch.Generator().manual_seed(seed)
    latents = torch.randn(2, 4, 3, 8, 8, generator=gen, dtype=torch.float64)
    poses = torch.rand(2, 4, 3, generator=gen, dtype=torch.float64)
    poses[..., 2] = 1.5
    targets = DiffusionBatch(
        latents=latents,
        timesteps=torch.randint(1, 1001, (2, 4), generator=gen),
        noises=torch.randn(latents.shape, generator=gen, dtype=torch.float64),
        condition=ConditionBundle(embedding=torch.randn(2, 16, generator=gen, dtype=torch.float64), poses=poses),
    )
    reference = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    return EMABatch(reference_latent=reference, targets=targets)


class ReferenceHead(nn.Module):
    """Adds a learned offset to the reference-slot prediction and nothing else."""

    def __init__(self, denoiser: MultiViewDenoiser):
        super().__init__()
        self.denoiser = denoiser
        self.offset = nn.Parameter(torch.zeros(denoiser.latent_channels, dtype=torch.float64))

    def forward(self, latents, timesteps, poses, embedding, drop_condition=None, is_reference=None):
        out = self.denoiser(latents, timesteps, poses, embedding, drop_condition=drop_condition, is_reference=is_reference)
        if is_reference is None:
            return out
        return torch.cat([out[:, :1] + self.offset.view(1, 1, -1, 1, 1), out[:, 1:]], dim=1)


def test_reference_only_parameters_do_not_move_the_ema_loss(tiny_denoiser):
    schedule = make_schedule()
    model = ReferenceHead(tiny_denoiser.double().eval())
    batch = _ema_batch()

    base = loss_ema(model, batch, schedule)
    (grad,) = torch.autograd.grad(base, model.offset)
    assert float(grad.abs().max()) == 0.0

    for h in (1e-3, 1.0):
        with torch.no_grad():
            model.offset.fill_(h)
            moved = loss_ema(model, batch, schedule)
            model.offset.zero_()
        assert abs(float(moved) - float(base)) < 1e-10

    # a shared parameter does move it
    with torch.no_grad():
        tiny_denoiser.conv_out.bias.add_(1e-3)
        shifted = loss_ema(model, batch, schedule)
    assert abs(float(shifted) - float(base)) > 1e-8


def test_reference_blind_model_gives_the_multi_view_loss(tiny_denoiser_config, codec_config):
    config = tiny_denoiser_config.model_copy(update={"attention_mode": AttentionMode.PLAIN_MULTIVIEW})
    model = MultiViewDenoiser(config, codec_config.D_emb, seed=5).double().eval()
    schedule = make_schedule()
    batch = _ema_batch(seed=1)
    with torch.no_grad():
        ema = loss_ema(model, batch, schedule)
        mv = loss_mv(model, batch.targets, schedule)
        other = loss_ema(
            model,
            EMABatch(reference_latent=batch.reference_latent + 0.5, targets=batch.targets),
            schedule,
        )
    assert abs(float(ema) - float(mv)) < 1e-10
    assert abs(float(other) - float(ema)) < 1e-10


def test_dropped_condition_uses_the_null_embedding(tiny_denoiser):
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(2, 16, generator=gen), torch.randn(2, 16, generator=gen)
    drop = torch.tensor([True, False])
    ctx_a = tiny_denoiser.context(a, drop)
    ctx_b = tiny_denoiser.context(b, drop)
    torch.testing.assert_close(ctx_a[0], ctx_b[0])
    assert not torch.allclose(ctx_a[1], ctx_b[1])


def test_timestep_features_at_zero():
    feats = timestep_features(torch.tensor(0), 8)
    assert feats.tolist() == [1.0] * 4 + [0.0] * 4


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_timestep_features_match_the_sinusoid(t):
    dim, half = 16, 8
    args = [t * 10000.0 ** (-k / half) for k in range(half)]
    expected = torch.tensor([math.cos(a) for a in args] + [math.sin(a) for a in args], dtype=torch.float64)
    torch.testing.assert_close(timestep_features(torch.tensor(t), dim), expected, atol=1e-12, rtol=0)


def test_timestep_embeddings_are_distinct(tiny_denoiser):
    with torch.no_grad():
        emb = tiny_denoiser.embed_timestep(torch.tensor([1, 500, 1000]))
    for i in range(3):
        for j in range(i + 1, 3):
            assert not torch.allclose(emb[i], emb[j]), (i, j)
    with pytest.raises(ContractViolation):
        tiny_denoiser.embed_timestep(torch.tensor([1001]))


def test_camera_embedding_is_periodic_in_azimuth(tiny_denoiser):
    model = tiny_denoiser.double()
    poses = torch.tensor([[0.3, 0.7, 1.5], [-0.1, 2.9, 1.5]], dtype=torch.float64)
    turned = poses.clone()
    turned[:, 1] += 2 * math.pi
    torch.testing.assert_close(camera_features(turned), camera_features(poses), atol=1e-12, rtol=0)
    with torch.no_grad():
        torch.testing.assert_close(model.embed_camera(turned), model.embed_camera(poses), atol=1e-10, rtol=0)


def test_camera_features_separate_with_the_azimuth_gap():
    gaps = torch.deg2rad(torch.arange(0.0, 181.0, 5.0, dtype=torch.float64))
    for elevation in (0.0, 0.4):
        poses = torch.stack([torch.full_like(gaps, elevation), gaps, torch.full_like(gaps, 1.5)], dim=-1)
        features = camera_features(poses)
        distance = (features - features[0]).norm(dim=-1)
        assert bool((distance[1:] > distance[:-1]).all())


def test_zero_pose_is_the_reference_embedding(tiny_denoiser):
    zero = torch.tensor([RelativePose.zero(1.5).as_tuple()])
    with torch.no_grad():
        a = tiny_denoiser.embed_camera(zero)
        b = tiny_denoiser.embed_camera(torch.tensor([[0.0, 0.0, 1.5]]))
    assert torch.equal(a, b)
    assert camera_features(zero.double()).tolist() == [[0.0, 1.0, 0.0, 1.0, 1.5]]


def test_slot_meta_reference_rules():
    zero = RelativePose.zero()
    SlotMeta(timestep=0, pose=zero, is_reference=True)
    with pytest.raises(ValueError):
        SlotMeta(timestep=3, pose=zero, is_reference=True)
    with pytest.raises(ValueError):
        SlotMeta(timestep=0, pose=RelativePose.from_degrees(0, 10, 1.5), is_reference=True)


def test_assemble_ema_sequence_puts_reference_first(tiny_denoiser):
    metas = [SlotMeta(timestep=500, pose=RelativePose.from_degrees(0, 90 * k, 1.5)) for k in range(4)]
    reference = torch.zeros(3, 8, 8)
    targets = torch.randn(4, 3, 8, 8)
    latents, slots = assemble_ema_sequence(reference, targets, metas)
    assert latents.shape == (5, 3, 8, 8)
    assert torch.equal(latents[0], reference) and torch.equal(latents[1:], targets)
    assert slots[0].is_reference and slots[0].timestep == 0
    out = predict_noise(tiny_denoiser, latents, slots, torch.randn(16))
    assert out.shape == (5, 3, 8, 8)


def test_assemble_rejects_clean_targets():
    metas = [SlotMeta(timestep=0, pose=RelativePose.zero())]
    with pytest.raises(ContractViolation):
        assemble_ema_sequence(torch.zeros(3, 2, 2), torch.zeros(1, 3, 2, 2), metas)


def test_branch_frequencies():
    rng = np.random.default_rng(0)
    draws = [branch_selector(rng, 0.3) for _ in range(4000)]
    share = sum(d == Branch.SINGLE_VIEW for d in draws) / len(draws)
    assert share == pytest.approx(0.3, abs=0.03)


def test_same_seed_builds_identical_weights(tiny_denoiser_config):
    a = MultiViewDenoiser(tiny_denoiser_config, 16, seed=3)
    b = MultiViewDenoiser(tiny_denoiser_config, 16, seed=3)
    for (name, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(pa, pb), name


def test_checkpoint_round_trip(tmp_path, tiny_denoiser, encoder, codec):
    schedule = make_schedule()
    path = save_checkpoint(tmp_path / "model.pt", tiny_denoiser, encoder, codec, schedule)
    loaded = load_checkpoint(path)
    for name, tensor in tiny_denoiser.state_dict().items():
        assert torch.equal(loaded.denoiser.state_dict()[name], tensor), name
    assert loaded.encoder.parameter_digest() == encoder.parameter_digest()
    assert torch.equal(loaded.schedule.alpha_bar, schedule.alpha_bar)
    assert loaded.train_state is None


def test_checkpoint_with_tampered_encoder_fails(tmp_path, tiny_denoiser, encoder, codec):
    path = save_checkpoint(tmp_path / "model.pt", tiny_denoiser, encoder, codec, make_schedule())
    payload = torch.load(path, weights_only=False)
    payload["embedding_digest"] = "0" * 64
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.pt")
