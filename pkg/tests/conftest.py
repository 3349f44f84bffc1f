"""
Shared fixtures: a tiny on-disk dataset, a tiny denoiser and the default
noise schedule. Everything is seeded, so tests are order-independent.
"""

from __future__ import annotations

import pytest

from mvdistill.core.config import CameraConfig, CodecConfig, DenoiserConfig, ExperimentConfig, ScheduleConfig
from mvdistill.data.repository import load_dataset
from mvdistill.data.synth import build_dataset
from mvdistill.diffusion.schedule import schedule_from_config
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import MultiViewDenoiser
from mvdistill.training.batches import prepare_objects

TINY_RESOLUTION = 32
TINY_VIEWS = 8


@pytest.fixture(scope="session")
def tiny_camera() -> CameraConfig:
    return CameraConfig(views_per_object=TINY_VIEWS)


@pytest.fixture(scope="session")
def codec_config() -> CodecConfig:
    return CodecConfig(D_emb=16)


@pytest.fixture(scope="session")
def codec(codec_config) -> LatentCodec:
    return LatentCodec(codec_config)


@pytest.fixture(scope="session")
def encoder(codec_config) -> EmbeddingEncoder:
    return EmbeddingEncoder(codec_config)


@pytest.fixture(scope="session")
def schedule():
    return schedule_from_config(ScheduleConfig())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_camera):
    root = tmp_path_factory.mktemp("dataset")
    build_dataset(3, 7, root, resolution=TINY_RESOLUTION, camera=tiny_camera)
    return root


@pytest.fixture(scope="session")
def tiny_objects(tiny_dataset, codec, encoder):
    return prepare_objects(load_dataset(tiny_dataset), codec, encoder)


@pytest.fixture
def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(
        base_channels=8,
        depth=1,
        attn_heads=2,
        time_embed_dim=16,
        camera_embed_dim=16,
        context_tokens=2,
        max_views=5,
    )


@pytest.fixture
def tiny_denoiser(tiny_denoiser_config, codec_config) -> MultiViewDenoiser:
    return MultiViewDenoiser(tiny_denoiser_config, codec_config.D_emb, seed=0)


@pytest.fixture
def tiny_experiment(tiny_camera, tiny_denoiser_config, codec_config) -> ExperimentConfig:
    return ExperimentConfig(
        camera=tiny_camera,
        codec=codec_config,
        denoiser=tiny_denoiser_config,
        dataset={"n_objects": 3, "resolution": TINY_RESOLUTION},
        stage1={"steps": 4, "batch_objects": 2, "log_every": 2, "checkpoint_every": 2},
        stage2={"steps": 2, "batch_objects": 2, "log_every": 1, "checkpoint_every": 2},
    )
