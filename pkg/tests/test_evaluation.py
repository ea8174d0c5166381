"""Tests for rollout evaluation, mode coverage and the scale sweep."""

from typing import Any

import numpy as np
import pytest

from hiflow.config import RunConfig
from hiflow.core import HiFlowPolicy
from hiflow.dataset import Dataset, stack_episodes
from hiflow.errors import ConfigError
from hiflow.evaluation import (
    THREADS_ENV,
    AblationRow,
    ablation_table,
    coarse_to_fine_consistency,
    default_threads,
    eval_table,
    evaluate,
    first_chunk_path,
    mode_coverage,
    policy_agents,
    save_results,
    scale_ablation,
)
from hiflow.normalization import Normalizer, fit_normalizer
from hiflow.tasks import RandomAgent, ReachEnv, ScriptedExpert

from .conftest import tiny_config


def _expert(index: int) -> ScriptedExpert:
    return ScriptedExpert(8, rng=np.random.default_rng(index))


@pytest.fixture()
def reach_normalizer(reach_data: Dataset) -> Normalizer:
    return fit_normalizer(stack_episodes(reach_data).chunks)


class TestDefaultThreads:
    def test_env_override(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv(THREADS_ENV, "3")
        assert default_threads() == 3

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_invalid_env(self, monkeypatch: pytest.MonkeyPatch, raw: str) -> None:
        monkeypatch.setenv(THREADS_ENV, raw)
        with pytest.raises(ConfigError):
            default_threads()

    def test_falls_back_to_cores(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert default_threads() >= 1


class TestEvaluate:
    def test_expert_solves_both_tasks(self) -> None:
        reach = evaluate(_expert, "reach", 8, seed=0, threads=2, name="expert")
        assert reach.success_rate == 1.0
        assert reach.collisions == 0
        waypoints = evaluate(_expert, "waypoints", 6, seed=0, threads=2, num_tasks=3)
        assert waypoints.success_rate == 1.0
        assert [o.task_id for o in waypoints.outcomes] == [0, 1, 2, 0, 1, 2]

    def test_independent_of_worker_count(self) -> None:
        def random_agents(index: int) -> RandomAgent:
            return RandomAgent(4, np.random.default_rng(index))

        one = evaluate(random_agents, "reach", 6, seed=1, threads=1, max_chunks=3)
        four = evaluate(random_agents, "reach", 6, seed=1, threads=4, max_chunks=3)
        assert one.to_dict() == four.to_dict()

    def test_random_agent_rarely_succeeds(self) -> None:
        def random_agents(index: int) -> RandomAgent:
            return RandomAgent(8, np.random.default_rng([7, index]))

        report = evaluate(random_agents, "reach", 200, seed=0, threads=4)
        assert report.n_rollouts == 200
        assert report.success_rate < 0.10

    def test_policy_independent_of_worker_count(
        self, trained_like_policy: HiFlowPolicy, reach_normalizer: Normalizer
    ) -> None:
        factory = policy_agents(trained_like_policy, reach_normalizer, seed=2)
        one = evaluate(factory, "reach", 4, seed=2, threads=1, max_chunks=2)
        four = evaluate(factory, "reach", 4, seed=2, threads=4, max_chunks=2)
        assert one.to_dict() == four.to_dict()

    def test_untrained_policy_rarely_succeeds(
        self, policy: HiFlowPolicy, reach_normalizer: Normalizer
    ) -> None:
        factory = policy_agents(policy, reach_normalizer, seed=0)
        report = evaluate(factory, "reach", 20, seed=0, threads=2, max_chunks=2)
        assert report.n_rollouts == 20
        assert report.success_rate < 0.5

    def test_report_summary(self) -> None:
        report = evaluate(_expert, "reach", 3, seed=4, threads=1)
        summary = report.summary()
        assert summary["n_rollouts"] == 3
        assert summary["mean_chunks"] == report.mean_chunks > 0
        assert len(report.to_dict()["outcomes"]) == 3

    def test_tables(self) -> None:
        report = evaluate(_expert, "reach", 2, seed=0, threads=1, name="expert")
        assert eval_table([report, report]).row_count == 2
        rows = [AblationRow((1, 2, 4), 3, [0.5, 1.0])]
        assert ablation_table(rows).row_count == 1


class TestCoverage:
    def test_counts_cover_every_sample(
        self, trained_like_policy: HiFlowPolicy, reach_normalizer: Normalizer
    ) -> None:
        obs = ReachEnv().reset(np.random.default_rng(0))
        coverage = mode_coverage(trained_like_policy, reach_normalizer, obs, n_samples=12, seed=0)
        assert sum(coverage.counts.values()) == 12
        assert sum(coverage.frequencies.values()) == pytest.approx(1.0)
        assert 0 <= coverage.crossings <= 12
        assert set(coverage.to_dict()) == {"n_samples", "counts", "frequencies", "crossings"}

    def test_first_chunk_path_clips(self) -> None:
        path = first_chunk_path(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.1]]))
        np.testing.assert_allclose(path, [[0.0, 0.0], [0.2, 0.0], [0.2, -0.1]])


class TestConsistency:
    def test_report_fields(
        self, trained_like_policy: HiFlowPolicy, reach_normalizer: Normalizer
    ) -> None:
        env = ReachEnv()
        observations = [env.reset(np.random.default_rng(k)) for k in range(6)]
        report = coarse_to_fine_consistency(trained_like_policy, reach_normalizer, observations, seed=0)
        assert np.isfinite(report.own) and np.isfinite(report.paired)
        assert report.to_dict()["informative"] == (report.own < report.paired)

    def test_needs_two_observations(
        self, policy: HiFlowPolicy, reach_normalizer: Normalizer
    ) -> None:
        obs = ReachEnv().reset(np.random.default_rng(0))
        with pytest.raises(ConfigError):
            coarse_to_fine_consistency(policy, reach_normalizer, [obs], seed=0)


class TestScaleAblation:
    def test_matched_flow_budget(self, tmp_path: Any) -> None:
        run = RunConfig(
            train=tiny_config(),
            episodes=4,
            rollouts=2,
            max_chunks=2,
            threads=1,
            use_ema=False,
        )
        rows = scale_ablation(run, [(1, 2, 4), (1, 4)], seeds=[0], steps=2, match_flow_evals=True)
        assert [r.label for r in rows] == ["{1,2,4}", "{1,4}"]
        assert rows[0].flow_evals == 9
        assert rows[1].n_steps == 4
        for row in rows:
            assert len(row.success_rates) == 1
            assert 0.0 <= row.mean_success <= 1.0
        path = save_results([r.to_dict() for r in rows], tmp_path / "ablation.json")
        assert path.exists()

    def test_unmatched_keeps_steps(self) -> None:
        run = RunConfig(train=tiny_config(), episodes=2, rollouts=1, max_chunks=1, threads=1, use_ema=False)
        rows = scale_ablation(run, [(1, 4)], seeds=[0], steps=1)
        assert rows[0].n_steps == 3
        assert rows[0].flow_evals == 6
