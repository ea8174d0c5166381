"""End-to-end behaviour of trained desk-profile policies.

These train real models on CPU and take minutes to hours; they are
deselected by default. Run with ``pytest -m slow tests/test_acceptance.py``.
"""

import numpy as np
import pytest

from hiflow.config import RunConfig, TrainConfig
from hiflow.core import HiFlowPolicy
from hiflow.dataset import Dataset, Episode
from hiflow.evaluation import coarse_to_fine_consistency, mode_coverage, scale_ablation
from hiflow.sampler import sample_chunk
from hiflow.tasks import ReachEnv, generate
from hiflow.training import Trainer, mean_loss, train

pytestmark = pytest.mark.slow

REACH_STEPS = 4000


@pytest.fixture(scope="module")
def reach_model():
    config = TrainConfig.desk(total_steps=REACH_STEPS, warmup_steps=200, learning_rate=3e-4, ema_rate=0.999)
    data = generate("reach", 200, seed=0, chunk_length=config.chunk_length)
    ckpt = train(config, data)
    return HiFlowPolicy.from_checkpoint(ckpt, use_ema=True), ckpt.normalizer


def _single_trajectory() -> Dataset:
    episode = generate("reach", 1, seed=0)[0]
    first = Episode(
        task_id=0,
        features=episode.features[:1],
        proprio=episode.proprio[:1],
        chunks=episode.chunks[:1],
    )
    return Dataset.from_episodes([first])


def test_memorizes_single_trajectory() -> None:
    data = _single_trajectory()
    config = TrainConfig.desk(
        total_steps=2000,
        warmup_steps=50,
        learning_rate=1e-3,
        lr_schedule="constant",
        batch_size=32,
        ema_rate=0.99,
    )
    trainer = Trainer(config, data)
    records = trainer.run()
    assert mean_loss(records[-50:]) * 10 <= mean_loss(records[:50])

    policy = HiFlowPolicy.from_checkpoint(trainer.checkpoint(), use_ema=True)
    target = trainer.normalizer.normalize(data[0].chunks[0].astype(np.float64))
    obs = data[0].observations()[0]
    close = 0
    for seed in range(20):
        trace = sample_chunk(policy, trainer.normalizer, obs, seed=seed)
        close += int(np.abs(trace.per_scale[config.chunk_length][0] - target).max() <= 0.05)
    assert close >= 19


def test_covers_both_detour_sides(reach_model) -> None:
    policy, normalizer = reach_model
    obs = ReachEnv().reset(np.random.default_rng(123))
    coverage = mode_coverage(policy, normalizer, obs, n_samples=200, seed=0)
    freq = coverage.frequencies
    assert 0.25 <= freq["left"] <= 0.75
    assert 0.25 <= freq["right"] <= 0.75
    assert coverage.crossings == 0


def test_coarse_sample_summarizes_its_refinement(reach_model) -> None:
    policy, normalizer = reach_model
    env = ReachEnv()
    observations = [env.reset(np.random.default_rng(k)) for k in range(100)]
    report = coarse_to_fine_consistency(policy, normalizer, observations, seed=0)
    assert report.informative, report.to_dict()


def test_multiscale_coverage_beats_single_scale(reach_model) -> None:
    policy, normalizer = reach_model
    obs = ReachEnv().reset(np.random.default_rng(123))
    multi = mode_coverage(policy, normalizer, obs, n_samples=200, seed=0)

    # same networks, one scale, same flow evaluations per sample
    config = TrainConfig.desk(
        total_steps=REACH_STEPS, warmup_steps=200, learning_rate=3e-4, ema_rate=0.999,
        scales=(8,), n_steps=100,
    )
    data = generate("reach", 200, seed=0, chunk_length=8)
    ckpt = train(config, data)
    single = mode_coverage(
        HiFlowPolicy.from_checkpoint(ckpt), ckpt.normalizer, obs, n_samples=200, seed=0
    )

    def balance(cov) -> float:
        return min(cov.frequencies["left"], cov.frequencies["right"])

    assert balance(multi) >= balance(single)


def test_full_scale_set_not_worse_than_sparse() -> None:
    run = RunConfig(
        train=TrainConfig.desk(total_steps=REACH_STEPS, warmup_steps=200, learning_rate=3e-4, ema_rate=0.999),
        episodes=200,
        rollouts=200,
    )
    rows = scale_ablation(run, [(1, 2, 4, 8), (1, 8)], seeds=[0, 1, 2])
    full, sparse = rows
    assert full.mean_success >= sparse.mean_success - 0.02
