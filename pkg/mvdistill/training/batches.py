"""
mvdistill: Training Batches

Objects are encoded once (latents of every view plus the frozen embedding of
every random view); batches are then drawn from a numpy generator so that the
content of batch i depends only on the seed and i.

Both stages share the branch logic: with probability branch_p_single one
random target view, otherwise the four orthogonal fixed views. Poses are
relative to the reference view, a random view whose embedding conditions the
batch. Stage 2 adds that reference view's clean latent at slot 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

from mvdistill.core.config import TrainConfig
from mvdistill.core.errors import ContractViolation
from mvdistill.data.synth import ObjectRecord
from mvdistill.diffusion.losses import ConditionBundle, DiffusionBatch, EMABatch
from mvdistill.geometry.camera import CameraPose, relative_pose
from mvdistill.models.codec import EmbeddingEncoder, LatentCodec
from mvdistill.models.denoiser import Branch, branch_selector

N_ORTHOGONAL = 4


@dataclass(frozen=True)
class PreparedObject:
    object_id: str
    random_latents: torch.Tensor  # [N, C, h, w]
    fixed_latents: torch.Tensor  # [N, C, h, w]
    random_embeddings: torch.Tensor  # [N, D]
    random_poses: Tuple[CameraPose, ...]
    fixed_poses: Tuple[CameraPose, ...]


def prepare_objects(
    records: Iterable[ObjectRecord],
    codec: LatentCodec,
    encoder: EmbeddingEncoder,
) -> List[PreparedObject]:
    prepared = []
    for record in records:
        random_images = np.stack([v.image for v in record.random_views]).astype(np.float32)
        fixed_images = np.stack([v.image for v in record.fixed_views]).astype(np.float32)
        prepared.append(
            PreparedObject(
                object_id=record.object.object_id,
                random_latents=codec.encode_latent(random_images),
                fixed_latents=codec.encode_latent(fixed_images),
                random_embeddings=encoder.encode_embedding(random_images),
                random_poses=tuple(v.pose for v in record.random_views),
                fixed_poses=tuple(v.pose for v in record.fixed_views),
            )
        )
    return prepared


def orthogonal_indices(n_fixed: int, offset: int) -> List[int]:
    """Four fixed-view indices 90 degrees apart, starting at `offset`."""
    if n_fixed % N_ORTHOGONAL:
        raise ContractViolation(f"{n_fixed} fixed views cannot be split into four orthogonal sets")
    stride = n_fixed // N_ORTHOGONAL
    return [offset % stride + k * stride for k in range(N_ORTHOGONAL)]


def _draw(objects: Sequence[PreparedObject], rng: np.random.Generator, config: TrainConfig, T: int):
    if not objects:
        raise ContractViolation("cannot draw a batch from an empty dataset", component="trainer")
    branch = branch_selector(rng, config.branch_p_single)

    references, targets, poses, embeddings = [], [], [], []
    for _ in range(config.batch_objects):
        obj = objects[int(rng.integers(len(objects)))]
        n_random = len(obj.random_poses)
        ref = int(rng.integers(n_random))
        if branch == Branch.SINGLE_VIEW:
            other = int(rng.integers(n_random - 1))
            target = other + (other >= ref)
            latents = obj.random_latents[target : target + 1]
            target_poses = [obj.random_poses[target]]
        else:
            idx = orthogonal_indices(len(obj.fixed_poses), int(rng.integers(len(obj.fixed_poses))))
            latents = obj.fixed_latents[idx]
            target_poses = [obj.fixed_poses[i] for i in idx]
        reference_pose = obj.random_poses[ref]
        references.append(obj.random_latents[ref])
        targets.append(latents)
        poses.append([relative_pose(reference_pose, p) for p in target_poses])
        embeddings.append(obj.random_embeddings[ref])

    latents = torch.stack(targets)
    timesteps = torch.from_numpy(rng.integers(1, T + 1, size=tuple(latents.shape[:2])))
    noises = torch.from_numpy(rng.standard_normal(size=tuple(latents.shape))).to(latents.dtype)
    drop = torch.from_numpy(rng.random(len(targets)) < config.cond_dropout)
    batch = DiffusionBatch(
        latents=latents,
        timesteps=timesteps,
        noises=noises,
        condition=ConditionBundle.from_poses(torch.stack(embeddings), poses),
        drop_condition=drop,
    )
    return branch, batch, torch.stack(references)


def make_stage1_batch(
    objects: Sequence[PreparedObject], rng: np.random.Generator, config: TrainConfig, T: int
) -> Tuple[Branch, DiffusionBatch]:
    branch, batch, _ = _draw(objects, rng, config, T)
    return branch, batch


def make_stage2_batch(
    objects: Sequence[PreparedObject], rng: np.random.Generator, config: TrainConfig, T: int
) -> Tuple[Branch, EMABatch]:
    branch, batch, references = _draw(objects, rng, config, T)
    return branch, EMABatch(reference_latent=references, targets=batch)
