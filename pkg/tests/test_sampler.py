"""Tests for Euler integration, coarse-to-fine sampling and plot output."""

import json
from typing import Any, List

import numpy as np
import pytest
import torch

from hiflow.config import TrainConfig
from hiflow.core import HiFlowPolicy, build_policy
from hiflow.errors import NumericError, RangeError, TraceError
from hiflow.normalization import Normalizer
from hiflow.sampler import (
    SampleTrace,
    cumulative_panel,
    dump_trace,
    euler_integrate,
    expected_forward_passes,
    load_trace,
    plot_description,
    sample_chunk,
    trace_to_plot,
)

from .conftest import perturb, random_observations


class TestEuler:
    def test_constant_field(self) -> None:
        x0 = torch.tensor([1.0, -2.0], dtype=torch.float64)
        v = torch.tensor([0.5, 0.25], dtype=torch.float64)
        out = euler_integrate(lambda x, tau: v, x0, 7)
        assert torch.allclose(out, x0 - v, atol=1e-12)

    def test_linear_field_closed_form(self) -> None:
        x0 = torch.tensor([1.0], dtype=torch.float64)
        for n in (1, 4, 25):
            out = euler_integrate(lambda x, tau: x, x0, n)
            assert abs(float(out[0]) - (1 - 1 / n) ** n) <= 1e-9

    def test_linear_field_approaches_exponential(self) -> None:
        # x(0) = exp(-1) for dx/dtau = x from x(1) = 1; error ~ exp(-1) / 2n
        x0 = torch.ones(1, dtype=torch.float64)
        errors = []
        for n in (10, 100, 1000):
            out = euler_integrate(lambda x, tau: x, x0, n)
            err = abs(float(out[0]) - np.exp(-1.0))
            assert 0.15 < n * err < 0.2
            errors.append(err)
        assert errors[0] > errors[1] > errors[2]

    def test_first_order_convergence(self) -> None:
        # dx/dtau = tau integrates exactly to x(0) = x(1) - 1/2
        x0 = torch.zeros(1, dtype=torch.float64)
        errors = []
        for n in (5, 25, 125):
            out = euler_integrate(lambda x, tau: torch.full_like(x, tau), x0, n)
            errors.append(abs(float(out[0]) + 0.5))
        assert errors[0] > errors[1] > errors[2]
        for coarse, fine in zip(errors, errors[1:]):
            assert coarse / fine == pytest.approx(5.0, rel=1e-6)

    def test_tau_sequence(self) -> None:
        seen: List[float] = []

        def record(x: torch.Tensor, tau: float) -> torch.Tensor:
            seen.append(tau)
            return torch.zeros_like(x)

        euler_integrate(record, torch.zeros(1), 4)
        assert seen == [1.0, 0.75, 0.5, 0.25]

    def test_requires_a_step(self) -> None:
        with pytest.raises(RangeError):
            euler_integrate(lambda x, tau: x, torch.zeros(1), 0)

    def test_blow_up_reports_step(self) -> None:
        def explode(x: torch.Tensor, tau: float) -> torch.Tensor:
            return torch.full_like(x, float("inf")) if tau < 0.6 else torch.zeros_like(x)

        with pytest.raises(NumericError) as info:
            euler_integrate(explode, torch.zeros(1), 4)
        assert info.value.step == 3


class TestSampleChunk:
    def test_shapes_and_passes(
        self, trained_like_policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        obs = random_observations(config, 3)
        trace = sample_chunk(trained_like_policy, normalizer, obs, seed=1)
        assert trace.chunk.shape == (3, 4, 2)
        assert {i: a.shape for i, a in trace.per_scale.items()} == {
            1: (3, 1, 2),
            2: (3, 2, 2),
            4: (3, 4, 2),
        }
        assert trace.complete
        assert trace.scalear_passes == 3
        assert trace.flow_passes == 9
        assert trace.forward_passes == expected_forward_passes(3, 3) == 12
        assert sorted(trace.wall_ms) == [1, 2, 4]

    def test_desk_profile_pass_count(self, normalizer: Normalizer) -> None:
        config = TrainConfig.desk(n_steps=25)
        policy = build_policy(config)
        trace = sample_chunk(policy, normalizer, random_observations(config, 1))
        assert trace.forward_passes == 104

    def test_n_steps_override(self, policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer) -> None:
        trace = sample_chunk(policy, normalizer, random_observations(config, 1), n_steps=5)
        assert trace.n_steps == 5
        assert trace.forward_passes == 18

    def test_same_seed_same_chunk(
        self, trained_like_policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        obs = random_observations(config, 2)
        a = sample_chunk(trained_like_policy, normalizer, obs, seed=7)
        b = sample_chunk(trained_like_policy, normalizer, obs, seed=7)
        np.testing.assert_array_equal(a.chunk, b.chunk)
        c = sample_chunk(trained_like_policy, normalizer, obs, seed=8)
        assert not np.array_equal(a.chunk, c.chunk)

    def test_untrained_policy_returns_its_noise(
        self, policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        trace = sample_chunk(policy, normalizer, random_observations(config, 2), seed=3)
        gen = torch.Generator().manual_seed(3)
        for scale in (1, 2, 4):
            noise = torch.randn((2, scale, 2), generator=gen, dtype=torch.float64)
            np.testing.assert_array_equal(trace.per_scale[scale], noise.numpy())
        np.testing.assert_allclose(
            trace.chunk, normalizer.denormalize(trace.per_scale[4]), atol=1e-12
        )

    def test_uninstrumented_counts_nothing(
        self, policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        trace = sample_chunk(policy, normalizer, random_observations(config, 1), instrument=False)
        assert trace.forward_passes == 0
        # hooks are removed after an instrumented call
        sample_chunk(policy, normalizer, random_observations(config, 1))
        assert not policy.flownet._forward_hooks
        assert not policy.scalear._forward_hooks

    def test_non_finite_flow_names_scale(
        self, policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        with torch.no_grad():
            policy.flownet.head.linear.weight.fill_(float("nan"))
        with pytest.raises(NumericError) as info:
            sample_chunk(policy, normalizer, random_observations(config, 1))
        assert info.value.scale == 1


class TestTraceFiles:
    def test_dump_and_load(
        self, trained_like_policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer, tmp_path: Any
    ) -> None:
        trace = sample_chunk(trained_like_policy, normalizer, random_observations(config, 2))
        path = dump_trace(trace, tmp_path / "out" / "trace.json")
        loaded = load_trace(path)
        assert loaded.scales == trace.scales
        assert loaded.forward_passes == trace.forward_passes
        np.testing.assert_allclose(loaded.chunk, trace.chunk)
        for scale, values in trace.per_scale.items():
            np.testing.assert_allclose(loaded.per_scale[scale], values)

    def test_to_dict_keys(self) -> None:
        trace = SampleTrace(
            scales=[1, 2],
            chunk_length=2,
            per_scale={1: np.zeros((1, 1, 2)), 2: np.zeros((1, 2, 2))},
            chunk=np.zeros((1, 2, 2)),
            n_steps=3,
            scalear_passes=2,
            flow_passes=6,
        )
        data = trace.to_dict()
        assert data["forward_passes"] == 8
        assert sorted(data["per_scale"]) == ["1", "2"]


class TestPlotDescription:
    def _trace(self) -> SampleTrace:
        return SampleTrace(
            scales=[1, 2, 4],
            chunk_length=4,
            per_scale={
                1: np.array([[[0.5, 0.0]]]),
                2: np.array([[[0.25, 0.0], [0.75, 0.0]]]),
                4: np.array([[[0.0, 0.1], [0.5, 0.1], [0.5, -0.1], [1.0, -0.1]]]),
            },
            chunk=np.zeros((1, 4, 2)),
            n_steps=1,
        )

    def test_panels_start_at_origin(self) -> None:
        desc = plot_description(self._trace())
        assert [p["scale"] for p in desc["panels"]] == [1, 2, 4]
        for panel in desc["panels"]:
            assert panel["start"] == [0.0, 0.0]
            assert len(panel["points"]) == panel["scale"] + 1
            assert panel["token_boundaries"] == list(range(panel["scale"] + 1))

    def test_coarse_token_covers_its_span(self) -> None:
        desc = plot_description(self._trace())
        # one token standing for four steps of 0.5
        assert desc["panels"][0]["end"] == pytest.approx([2.0, 0.0])
        assert desc["panels"][1]["end"] == pytest.approx([2.0, 0.0])
        assert desc["panels"][2]["end"] == pytest.approx([2.0, 0.0])

    def test_finest_end_is_chunk_sum(
        self, trained_like_policy: HiFlowPolicy, config: TrainConfig, normalizer: Normalizer
    ) -> None:
        trace = sample_chunk(trained_like_policy, normalizer, random_observations(config, 2))
        desc = plot_description(trace, normalizer, index=1)
        np.testing.assert_allclose(desc["panels"][-1]["end"], trace.chunk[1].sum(0), atol=1e-9)

    def test_missing_scale(self) -> None:
        trace = self._trace()
        del trace.per_scale[2]
        with pytest.raises(TraceError):
            plot_description(trace)

    def test_cumulative_panel(self) -> None:
        path = cumulative_panel(np.array([[1.0], [2.0]]), chunk_length=4)
        np.testing.assert_allclose(path[:, 0], [0.0, 2.0, 6.0])

    def test_json_output(self, tmp_path: Any) -> None:
        path = trace_to_plot(self._trace(), tmp_path / "plots" / "c2f.json")
        data = json.loads(path.read_text())
        assert data["scales"] == [1, 2, 4]
        assert len(data["panels"]) == 3


def test_perturbed_policies_differ(config: TrainConfig, normalizer: Normalizer) -> None:
    a = build_policy(config)
    b = build_policy(config)
    perturb(a, seed=0)
    perturb(b, seed=1)
    obs = random_observations(config, 1)
    assert not np.array_equal(
        sample_chunk(a, normalizer, obs).chunk, sample_chunk(b, normalizer, obs).chunk
    )


def test_plot_helper_exported() -> None:
    import hiflow

    assert "trace_to_plot" in hiflow.__all__
    assert hiflow.trace_to_plot is trace_to_plot
    with pytest.raises(AttributeError):
        hiflow.not_a_helper  # noqa: B018
