"""Shared fixtures for the HiFlow test suite."""

from typing import Any, Iterator

import numpy as np
import pytest
import torch

from hiflow.conditioning import Observation
from hiflow.config import TrainConfig
from hiflow.core import HiFlowPolicy, build_policy
from hiflow.dataset import Dataset
from hiflow.normalization import Normalizer
from hiflow.tasks import generate


def tiny_config(**overrides: Any) -> TrainConfig:
    """A float64 model small enough for finite differences and fast loops.

    ``chunk_length`` 4 over scales {1, 2, 4}; two tasks so task tokens are
    exercised.
    """
    values = dict(
        hidden_dim=16,
        chunk_length=4,
        scales=(1, 2, 4),
        scalear_depth=1,
        flow_depth=1,
        head_dim=8,
        time_embed_dim=16,
        num_tasks=2,
        batch_size=2,
        learning_rate=1e-3,
        min_learning_rate=1e-5,
        warmup_steps=2,
        total_steps=6,
        n_steps=3,
        ema_rate=0.5,
        log_every=1,
        dtype="float64",
    )
    values.update(overrides)
    return TrainConfig(**values)


def perturb(module: torch.nn.Module, seed: int = 0, std: float = 0.2) -> None:
    """Move every parameter off its (partly zero) initialization."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def random_observations(config: TrainConfig, n: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [
        Observation(
            features=rng.uniform(0, 1, config.feature_dim).astype(np.float32),
            proprio=rng.uniform(0, 1, config.proprio_dim).astype(np.float32),
            task_id=int(rng.integers(config.num_tasks)),
        )
        for _ in range(n)
    ]


@pytest.fixture(autouse=True)
def _fixed_torch_seed() -> Iterator[None]:
    torch.manual_seed(0)
    yield


@pytest.fixture()
def config() -> TrainConfig:
    return tiny_config()


@pytest.fixture()
def policy(config: TrainConfig) -> HiFlowPolicy:
    return build_policy(config)


@pytest.fixture()
def trained_like_policy(config: TrainConfig) -> HiFlowPolicy:
    """A policy whose zero-initialized gates and heads have been perturbed."""
    p = build_policy(config)
    perturb(p)
    return p


@pytest.fixture()
def normalizer() -> Normalizer:
    return Normalizer(np.array([-0.1, -0.1]), np.array([0.1, 0.1]))


@pytest.fixture()
def reach_data() -> Dataset:
    return generate("reach", 6, seed=0, chunk_length=4)


@pytest.fixture()
def waypoint_data() -> Dataset:
    return generate("waypoints", 4, seed=0, chunk_length=4, num_tasks=2)
