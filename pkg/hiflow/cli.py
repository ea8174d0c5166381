#!/usr/bin/env python3
"""Command line interface for HiFlow."""

import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np
import yaml
from rich.console import Console

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TASKS, RunConfig, load_run_config
from .core import HiFlowPolicy
from .dataset import load_dataset, save_dataset
from .errors import ConfigError, HiFlowError, ScheduleError
from .evaluation import (
    ablation_table,
    coarse_to_fine_consistency,
    eval_table,
    evaluate,
    mode_coverage,
    policy_agents,
    save_results,
    scale_ablation,
)
from .numerics import configure_determinism
from .sampler import dump_trace, expected_forward_passes, load_trace, sample_chunk, trace_to_plot
from .tasks import RandomAgent, ScriptedExpert, generate, make_env
from .training import Trainer
from .training import train as train_policy

RESOLVED_CONFIG = "resolved_config.yaml"


def handle_errors(func: Callable[..., None]) -> Callable[..., None]:
    """Map HiFlow errors to one diagnostic line and their exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            func(*args, **kwargs)
        except HiFlowError as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def parse_scales(text: str) -> Tuple[int, ...]:
    try:
        scales = tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)
    except ValueError as exc:
        raise ScheduleError(f"cannot parse scale list {text!r}") from exc
    if not scales:
        raise ScheduleError("scale list is empty")
    return scales


def resolve(config: Optional[str], **flags: Any) -> RunConfig:
    """Merge a config file with command-line flags (flags win)."""
    train: Dict[str, Any] = {}
    top: Dict[str, Any] = {}
    for key, value in flags.items():
        if value is None:
            continue
        if key == "scales":
            scales = parse_scales(value)
            train["scales"] = list(scales)
            train["chunk_length"] = max(scales)
        elif key == "steps":
            train["total_steps"] = value
        elif key == "strict_mask":
            train["strict_mask"] = value
        elif key == "seed":
            top["seed"] = value
            train["seed"] = value
        else:
            top[key] = value
    if train:
        top["train"] = train
    return load_run_config(config, top)


def write_resolved(run: RunConfig) -> Path:
    return run.save(run.out_path / RESOLVED_CONFIG)


def _dataset_for(run: RunConfig):
    if run.dataset:
        return load_dataset(run.dataset)
    logging.info("No dataset given; generating %d %s episodes", run.episodes, run.task)
    return generate(run.task, run.episodes, run.seed, run.train.chunk_length, run.num_tasks)


def _initial_observation(run: RunConfig, task_id: int = 0):
    env = make_env(run.task, task_id, run.num_tasks)
    obs = env.reset(np.random.default_rng(np.random.SeedSequence([run.seed, 4])))
    return env, obs


def _checkpoint_path(run: RunConfig) -> str:
    if run.checkpoint:
        return run.checkpoint
    return str(run.out_path / "checkpoint.hfck")


config_option = click.option(
    "--config", "-c", type=click.Path(exists=True, dir_okay=False), help="Configuration file"
)
seed_option = click.option("--seed", type=int, help="Random seed")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory")
task_option = click.option("--task", type=click.Choice(TASKS), help="Task name")
ema_option = click.option("--use-ema", type=click.BOOL, help="Use EMA weights (true/false)")


@click.group()
@click.version_option(version=__version__, prog_name="hiflow")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]),
    default="INFO",
    help="Logging level",
)
def cli(log_level: str) -> None:
    """HiFlow: coarse-to-fine flow-matching action policies."""
    logging.basicConfig(level=getattr(logging, log_level))


@cli.command()
@config_option
@task_option
@click.option("--episodes", type=int, help="Number of episodes")
@click.option("--num-tasks", type=int, help="Task count for the waypoints task")
@seed_option
@out_option
@handle_errors
def gen(
    config: Optional[str],
    task: Optional[str],
    episodes: Optional[int],
    num_tasks: Optional[int],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Generate expert demonstrations."""
    run = resolve(config, task=task, episodes=episodes, num_tasks=num_tasks, seed=seed, out_dir=out_dir)
    dataset = generate(run.task, run.episodes, run.seed, run.train.chunk_length, run.num_tasks)
    path = save_dataset(dataset, run.out_path / "dataset.hfds")
    write_resolved(run)
    click.echo(
        f"Generated {len(dataset)} episodes ({dataset.num_chunks()} chunks, task {run.task}) -> {path}"
    )


@cli.command()
@config_option
@click.option("--dataset", type=click.Path(dir_okay=False), help="Dataset file (.hfds)")
@click.option("--scales", help="Scale set, e.g. 1,2,4,8")
@click.option("--steps", type=int, help="Total training steps")
@click.option("--strict-mask", type=click.BOOL, help="Forbid same-scale attention (true/false)")
@click.option("--profile", type=click.Choice(["full", "desk"]), help="Model size profile")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to resume")
@task_option
@seed_option
@out_option
@handle_errors
def train(
    config: Optional[str],
    dataset: Optional[str],
    scales: Optional[str],
    steps: Optional[int],
    strict_mask: Optional[bool],
    profile: Optional[str],
    resume: Optional[str],
    task: Optional[str],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Train a policy end to end."""
    run = resolve(
        config,
        dataset=dataset,
        scales=scales,
        steps=steps,
        strict_mask=strict_mask,
        profile=profile,
        task=task,
        seed=seed,
        out_dir=out_dir,
    )
    configure_determinism(1)
    write_resolved(run)
    data = _dataset_for(run)
    start = load_checkpoint(resume) if resume else None
    trainer = Trainer(run.train, data, resume=start)
    trainer.run(metrics_path=run.out_path / "metrics.jsonl")
    path = save_checkpoint(trainer.checkpoint(), run.out_path / "checkpoint.hfck")
    click.echo(f"Trained {trainer.step} steps (config {run.train.config_hash()}) -> {path}")


@cli.command()
@config_option
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Checkpoint file")
@click.option("--task-id", type=int, default=0, show_default=True, help="Task id of the observation")
@task_option
@ema_option
@seed_option
@out_option
@handle_errors
def sample(
    config: Optional[str],
    checkpoint: Optional[str],
    task_id: int,
    task: Optional[str],
    use_ema: Optional[bool],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Sample one chunk for an initial observation and dump the trace."""
    run = resolve(config, checkpoint=checkpoint, task=task, use_ema=use_ema, seed=seed, out_dir=out_dir)
    ckpt = load_checkpoint(_checkpoint_path(run))
    policy = HiFlowPolicy.from_checkpoint(ckpt, use_ema=run.use_ema)
    _, obs = _initial_observation(run, task_id)
    trace = sample_chunk(policy, ckpt.normalizer, obs, seed=run.seed)
    path = dump_trace(trace, run.out_path / "trace.json")
    write_resolved(run)
    expected = expected_forward_passes(len(trace.scales), trace.n_steps)
    click.echo(f"Sampled chunk with {trace.forward_passes} forward passes (expected {expected}) -> {path}")


@cli.command(name="eval")
@config_option
@click.option(
    "--checkpoint", "checkpoints", multiple=True, type=click.Path(dir_okay=False),
    help="Checkpoint file (repeat to compare)",
)
@click.option("--rollouts", type=int, help="Rollouts per policy")
@click.option("--max-chunks", type=int, help="Chunk budget per rollout")
@click.option("--threads", type=int, help="Worker threads (default: HIFLOW_THREADS or cores)")
@click.option(
    "--baseline", "baselines", multiple=True, type=click.Choice(["expert", "random"]),
    help="Also evaluate a reference agent",
)
@task_option
@ema_option
@seed_option
@out_option
@handle_errors
def eval_cmd(
    config: Optional[str],
    checkpoints: Tuple[str, ...],
    rollouts: Optional[int],
    max_chunks: Optional[int],
    threads: Optional[int],
    baselines: Tuple[str, ...],
    task: Optional[str],
    use_ema: Optional[bool],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Evaluate checkpoints by closed-loop success rate."""
    run = resolve(
        config,
        rollouts=rollouts,
        max_chunks=max_chunks,
        threads=threads,
        task=task,
        use_ema=use_ema,
        seed=seed,
        out_dir=out_dir,
    )
    paths = list(checkpoints) or ([] if baselines else [_checkpoint_path(run)])
    reports = []
    for path in paths:
        ckpt = load_checkpoint(path)
        policy = HiFlowPolicy.from_checkpoint(ckpt, use_ema=run.use_ema)
        factory = policy_agents(policy, ckpt.normalizer, run.seed)
        reports.append(_evaluate(run, factory, Path(path).stem))
    T = run.train.chunk_length
    for name in baselines:
        if name == "expert":
            factory = lambda r: ScriptedExpert(T, np.random.default_rng([run.seed, 5, r]))  # noqa: E731
        else:
            factory = lambda r: RandomAgent(T, np.random.default_rng([run.seed, 6, r]))  # noqa: E731
        reports.append(_evaluate(run, factory, name))

    Console().print(eval_table(reports, title=f"Evaluation on {run.task}"))
    save_results([r.to_dict() for r in reports], run.out_path / "eval.json")
    write_resolved(run)


def _evaluate(run: RunConfig, factory: Any, name: str):
    return evaluate(
        factory,
        run.task,
        run.rollouts,
        run.seed,
        threads=run.threads,
        max_chunks=run.max_chunks,
        num_tasks=run.num_tasks,
        name=name,
    )


@cli.command()
@config_option
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Checkpoint file")
@click.option("--trace", "trace_file", type=click.Path(exists=True, dir_okay=False), help="Trace dump to plot")
@click.option("--output", "-o", default="coarse_to_fine.json", show_default=True, help="Plot file name (.json or image)")
@task_option
@ema_option
@seed_option
@out_option
@handle_errors
def plot(
    config: Optional[str],
    checkpoint: Optional[str],
    trace_file: Optional[str],
    output: str,
    task: Optional[str],
    use_ema: Optional[bool],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Write the per-scale cumulative displacement figure."""
    run = resolve(config, checkpoint=checkpoint, task=task, use_ema=use_ema, seed=seed, out_dir=out_dir)
    normalizer = None
    if trace_file:
        trace = load_trace(trace_file)
        if run.checkpoint:
            normalizer = load_checkpoint(run.checkpoint).normalizer
    else:
        ckpt = load_checkpoint(_checkpoint_path(run))
        normalizer = ckpt.normalizer
        policy = HiFlowPolicy.from_checkpoint(ckpt, use_ema=run.use_ema)
        _, obs = _initial_observation(run)
        trace = sample_chunk(policy, normalizer, obs, seed=run.seed)
    path = trace_to_plot(trace, run.out_path / output, normalizer=normalizer)
    write_resolved(run)
    click.echo(f"Plotted {len(trace.scales)} scale panels -> {path}")


@cli.command()
@config_option
@click.option("--scales", "scale_sets", multiple=True, help="Scale set to compare (repeat)")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated training seeds")
@click.option("--steps", type=int, help="Training steps per run")
@click.option("--match-flow-evals", is_flag=True, help="Give every set the first set's flow budget")
@click.option("--coverage", is_flag=True, help="Also report mode coverage and consistency")
@task_option
@seed_option
@out_option
@handle_errors
def ablate(
    config: Optional[str],
    scale_sets: Tuple[str, ...],
    seeds: str,
    steps: Optional[int],
    match_flow_evals: bool,
    coverage: bool,
    task: Optional[str],
    seed: Optional[int],
    out_dir: Optional[str],
) -> None:
    """Sweep scale configurations (train + evaluate each)."""
    run = resolve(config, task=task, seed=seed, out_dir=out_dir)
    schedules: List[Tuple[int, ...]] = [parse_scales(s) for s in scale_sets] or [(1, 2, 4, 8), (1, 8)]
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"cannot parse seeds {seeds!r}") from exc
    if not seed_list:
        raise ConfigError("no seeds given")
    write_resolved(run)
    rows = scale_ablation(run, schedules, seed_list, steps=steps, match_flow_evals=match_flow_evals)
    Console().print(ablation_table(rows, title=f"Scale configuration on {run.task}"))
    payload: Dict[str, Any] = {"rows": [r.to_dict() for r in rows]}
    if coverage:
        payload["coverage"] = _coverage_report(run, schedules, steps)
    save_results(payload, run.out_path / "ablation.json")


def _coverage_report(run: RunConfig, schedules: List[Tuple[int, ...]], steps: Optional[int]) -> List[dict]:
    out = []
    for scales in schedules:
        config = run.train.with_schedule(scales)
        data = generate(run.task, run.episodes, run.seed, config.chunk_length, run.num_tasks)
        ckpt = train_policy(config, data, steps=steps)
        policy = HiFlowPolicy.from_checkpoint(ckpt, use_ema=run.use_ema)
        _, obs = _initial_observation(run)
        cov = mode_coverage(policy, ckpt.normalizer, obs, 200, run.seed)
        envs = [_initial_observation(replace(run, seed=run.seed + k))[1] for k in range(100)]
        consistency = coarse_to_fine_consistency(policy, ckpt.normalizer, envs, run.seed)
        out.append({"scales": list(scales), "coverage": cov.to_dict(), "consistency": consistency.to_dict()})
    return out


@cli.command()
@click.argument("config_file", type=click.Path(exists=True))
def validate_config(config_file: str) -> None:
    """Validate a configuration file."""
    try:
        run = load_run_config(config_file)
    except HiFlowError as exc:
        click.echo(f"Error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except yaml.YAMLError as exc:
        click.echo(f"Error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"Configuration is valid (profile {run.profile}, config {run.train.config_hash()})")


def main() -> None:
    """Console-script entry point."""
    cli()


if __name__ == "__main__":
    main()
