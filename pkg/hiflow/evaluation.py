"""Closed-loop evaluation, mode coverage and the scale-configuration sweep."""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
import torch
from rich.table import Table

from .conditioning import Observation
from .config import RunConfig
from .core import HiFlowPolicy
from .dataset import Dataset
from .errors import ConfigError
from .multiscale import down
from .normalization import Normalizer
from .sampler import sample_chunk
from .tasks import (
    ACTION_CLIP,
    AgentFactory,
    Environment,
    generate,
    make_env,
    mode_of_path,
    path_crosses_obstacle,
    rollout,
)
from .training import train

THREADS_ENV = "HIFLOW_THREADS"


def default_threads() -> int:
    """Worker cap: ``HIFLOW_THREADS`` if set, else the physical core count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive, got {value}")
        return value
    return psutil.cpu_count(logical=False) or 1


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 3, index]).generate_state(1)[0])


class HiFlowAgent:
    """Rollout agent sampling one chunk per observation from a policy."""

    def __init__(
        self,
        policy: HiFlowPolicy,
        normalizer: Normalizer,
        n_steps: Optional[int] = None,
        seed: int = 0,
    ):
        self.policy = policy
        self.normalizer = normalizer
        self.n_steps = n_steps
        self.generator = torch.Generator().manual_seed(seed)

    def reset(self, env: Environment) -> None:
        pass

    def act(self, observation: Observation) -> np.ndarray:
        trace = sample_chunk(
            self.policy,
            self.normalizer,
            observation,
            n_steps=self.n_steps,
            generator=self.generator,
            instrument=False,
        )
        return trace.chunk[0]


def policy_agents(
    policy: HiFlowPolicy, normalizer: Normalizer, seed: int, n_steps: Optional[int] = None
) -> AgentFactory:
    """Agent factory giving rollout ``r`` its own noise stream."""

    def factory(index: int) -> HiFlowAgent:
        return HiFlowAgent(policy, normalizer, n_steps, seed=_sample_seed(seed, index))

    return factory


@dataclass
class EvalReport:
    name: str
    task: str
    seed: int
    outcomes: List[Any] = field(default_factory=list)

    @property
    def n_rollouts(self) -> int:
        return len(self.outcomes)

    @property
    def success_rate(self) -> float:
        return float(np.mean([o.success for o in self.outcomes])) if self.outcomes else 0.0

    @property
    def mean_chunks(self) -> float:
        return float(np.mean([o.chunks_used for o in self.outcomes])) if self.outcomes else 0.0

    @property
    def collisions(self) -> int:
        return int(sum(o.collisions for o in self.outcomes))

    def summary(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "task": self.task,
            "seed": self.seed,
            "n_rollouts": self.n_rollouts,
            "success_rate": self.success_rate,
            "mean_chunks": self.mean_chunks,
            "collisions": self.collisions,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = self.summary()
        data["outcomes"] = [o.to_dict() for o in self.outcomes]
        return data


def evaluate(
    agent_factory: AgentFactory,
    task: str,
    n_rollouts: int,
    seed: int,
    threads: Optional[int] = None,
    max_chunks: int = 16,
    num_tasks: int = 2,
    name: str = "policy",
) -> EvalReport:
    """
    Run ``n_rollouts`` independent episodes across a thread pool

    Rollout ``r`` draws its initial state from ``(seed, r)`` and its agent
    from ``agent_factory(r)``, so the report does not depend on the number
    of workers.
    """
    workers = threads or default_threads()

    def run(index: int):
        task_id = index % num_tasks if task == "waypoints" else 0
        env = make_env(task, task_id, num_tasks)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, index]))
        return rollout(agent_factory(index), env, rng, max_chunks=max_chunks, index=index)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(run, range(n_rollouts)))

    report = EvalReport(name=name, task=task, seed=seed, outcomes=outcomes)
    logging.info(
        "Evaluated %s on %s: success %.3f over %d rollouts (%d workers)",
        name,
        task,
        report.success_rate,
        n_rollouts,
        workers,
    )
    return report


@dataclass
class ModeCoverage:
    """First-chunk behaviour of many samples drawn for one observation."""

    n_samples: int
    counts: Dict[str, int]
    crossings: int

    @property
    def frequencies(self) -> Dict[str, float]:
        return {k: v / self.n_samples for k, v in self.counts.items()}

    @property
    def covers_both(self) -> bool:
        return self.counts["left"] > 0 and self.counts["right"] > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "counts": self.counts,
            "frequencies": self.frequencies,
            "crossings": self.crossings,
        }


def first_chunk_path(start: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    """Positions visited executing ``chunk`` from ``start`` (obstacle ignored)."""
    moves = np.clip(chunk, -ACTION_CLIP, ACTION_CLIP)
    return np.vstack([start, start + np.cumsum(moves, axis=0)])


def mode_coverage(
    policy: HiFlowPolicy,
    normalizer: Normalizer,
    observation: Observation,
    n_samples: int,
    seed: int,
    n_steps: Optional[int] = None,
) -> ModeCoverage:
    """Classify the detour side of ``n_samples`` first chunks."""
    trace = sample_chunk(policy, normalizer, [observation] * n_samples, n_steps, seed=seed)
    start = np.asarray(observation.proprio, dtype=np.float64)
    counts = {"left": 0, "right": 0, "undecided": 0}
    names = {0: "left", 1: "right", -1: "undecided"}
    crossings = 0
    for chunk in trace.chunk:
        path = first_chunk_path(start, chunk)
        counts[names[mode_of_path(start, path)]] += 1
        crossings += int(path_crosses_obstacle(path))
    return ModeCoverage(n_samples, counts, crossings)


@dataclass
class ConsistencyReport:
    """Distance of the coarsest sample to the average of its own refinement
    versus the refinement of a different sample."""

    own: float
    paired: float

    @property
    def informative(self) -> bool:
        return self.own < self.paired

    def to_dict(self) -> Dict[str, Any]:
        return {"own": self.own, "paired": self.paired, "informative": self.informative}


def coarse_to_fine_consistency(
    policy: HiFlowPolicy,
    normalizer: Normalizer,
    observations: Sequence[Observation],
    seed: int,
    n_steps: Optional[int] = None,
) -> ConsistencyReport:
    """Mean L2 between the coarsest sample and the coarsened finest sample."""
    if len(observations) < 2:
        raise ConfigError("consistency needs at least two observations")
    trace = sample_chunk(policy, normalizer, observations, n_steps, seed=seed)
    coarsest = trace.scales[0]
    coarse = torch.as_tensor(trace.per_scale[coarsest])
    summary = down(torch.as_tensor(trace.per_scale[trace.scales[-1]]), coarsest)
    n = coarse.shape[0]
    shift = 1 + int(np.random.default_rng(seed).integers(n - 1))
    partner = (torch.arange(n) + shift) % n
    own = (coarse - summary).flatten(1).norm(dim=1).mean()
    paired = (coarse - summary[partner]).flatten(1).norm(dim=1).mean()
    return ConsistencyReport(own=float(own), paired=float(paired))


@dataclass
class AblationRow:
    scales: Tuple[int, ...]
    n_steps: int
    success_rates: List[float]

    @property
    def label(self) -> str:
        return "{" + ",".join(str(s) for s in self.scales) + "}"

    @property
    def mean_success(self) -> float:
        return float(np.mean(self.success_rates))

    @property
    def flow_evals(self) -> int:
        return len(self.scales) * self.n_steps

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scales": list(self.scales),
            "n_steps": self.n_steps,
            "flow_evals": self.flow_evals,
            "success_rates": self.success_rates,
            "mean_success": self.mean_success,
        }


def scale_ablation(
    run: RunConfig,
    schedules: Sequence[Sequence[int]],
    seeds: Sequence[int],
    steps: Optional[int] = None,
    match_flow_evals: bool = False,
) -> List[AblationRow]:
    """
    Train and evaluate one policy per (scale set, seed)

    The chunk length of each run is its finest scale, so a set ending at
    16 trains on 16-step chunks. With ``match_flow_evals`` every set gets
    the flow-network budget of the first set.
    """
    datasets: Dict[int, Dataset] = {}
    reference = len(schedules[0]) * run.train.n_steps
    rows = []
    for scales in schedules:
        scales = tuple(int(s) for s in scales)
        config = run.train.with_schedule(scales)
        if match_flow_evals:
            config = replace(config, n_steps=max(1, round(reference / len(scales))))
        if config.chunk_length not in datasets:
            datasets[config.chunk_length] = generate(
                run.task, run.episodes, run.seed, config.chunk_length, run.num_tasks
            )
        rates = []
        for seed in seeds:
            seeded = replace(config, seed=seed)
            ckpt = train(seeded, datasets[config.chunk_length], steps=steps)
            policy = HiFlowPolicy.from_checkpoint(ckpt, use_ema=run.use_ema)
            report = evaluate(
                policy_agents(policy, ckpt.normalizer, seed),
                run.task,
                run.rollouts,
                seed,
                threads=run.threads,
                max_chunks=run.max_chunks,
                num_tasks=run.num_tasks,
                name=f"{scales}",
            )
            rates.append(report.success_rate)
        rows.append(AblationRow(scales, config.n_steps, rates))
        logging.info("Scale set %s: mean success %.3f", rows[-1].label, rows[-1].mean_success)
    return rows


def eval_table(reports: Sequence[EvalReport], title: str = "Evaluation") -> Table:
    table = Table(title=title)
    for column in ("policy", "task", "rollouts", "success", "mean chunks", "collisions"):
        table.add_column(column)
    for r in reports:
        table.add_row(
            r.name,
            r.task,
            str(r.n_rollouts),
            f"{r.success_rate:.3f}",
            f"{r.mean_chunks:.2f}",
            str(r.collisions),
        )
    return table


def ablation_table(rows: Sequence[AblationRow], title: str = "Scale configuration") -> Table:
    table = Table(title=title)
    for column in ("scales", "flow evals", "success per seed", "mean success"):
        table.add_column(column)
    for row in rows:
        table.add_row(
            row.label,
            str(row.flow_evals),
            ", ".join(f"{r:.3f}" for r in row.success_rates),
            f"{row.mean_success:.3f}",
        )
    return table


def save_results(payload: Union[Dict[str, Any], List[Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return path
