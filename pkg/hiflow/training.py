"""Single-stage end-to-end training.

One step: build multi-scale targets from the normalized chunk, feed the
ground-truth coarser scales to ScaleAR (teacher forcing), draw fresh
noise and flow time per scale, and regress ActionFlowNet onto the
straight-path velocity. Scale ``i`` is weighted ``(i / T) / |S|`` so the
finer scales, which carry the executable detail, dominate.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .actionflow import interpolate, velocity_target
from .checkpoint import Checkpoint
from .config import TrainConfig
from .core import HiFlowPolicy, build_policy
from .dataset import Dataset, TrainingArrays, stack_episodes
from .errors import NumericError, SchemaError
from .multiscale import ScaleSchedule, build_targets, teacher_forced_inputs
from .normalization import Normalizer, fit_normalizer


def scale_weights(schedule: ScaleSchedule) -> Dict[int, float]:
    """``{i: (i / T) / |S|}``."""
    count = len(schedule)
    return {i: (i / schedule.chunk_length) / count for i in schedule}


def combine_scale_losses(
    per_scale: Mapping[int, torch.Tensor], weights: Mapping[int, float]
) -> torch.Tensor:
    total = None
    for scale in sorted(per_scale):
        term = weights[scale] * per_scale[scale]
        total = term if total is None else total + term
    if total is None:
        raise NumericError("no scale losses to combine")
    return total


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_scale: Dict[int, torch.Tensor]
    weights: Dict[int, float]

    def to_dict(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "loss_per_scale": {str(i): float(v.detach()) for i, v in sorted(self.per_scale.items())},
            "weights": {str(i): w for i, w in sorted(self.weights.items())},
        }


@dataclass
class Batch:
    """Normalized training batch."""

    features: torch.Tensor
    proprio: torch.Tensor
    task_ids: torch.Tensor
    chunks: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.chunks.shape[0])


def flow_matching_loss(
    policy: HiFlowPolicy, batch: Batch, generator: Optional[torch.Generator] = None
) -> LossBreakdown:
    """Scale-weighted flow-matching loss with teacher forcing.

    One ``(noise, tau)`` draw per scale per example, taken from
    ``generator`` in ascending scale order.
    """
    schedule = policy.schedule
    targets = build_targets(batch.chunks, schedule)
    inputs = teacher_forced_inputs(targets, schedule)
    cond = policy.condition(batch.features, batch.proprio, batch.task_ids, inputs)

    per_scale: Dict[int, torch.Tensor] = {}
    for scale in schedule:
        target = targets[scale]
        noise = torch.randn(
            target.shape, generator=generator, dtype=target.dtype, device=target.device
        )
        tau = torch.rand(batch.size, generator=generator, dtype=target.dtype, device=target.device)
        state = interpolate(target, noise, tau)
        pred = policy.flownet.predict_velocity(state, cond[scale])
        mse = (pred - velocity_target(target, noise)).pow(2).mean()
        if not torch.isfinite(mse):
            raise NumericError("non-finite flow loss", scale=scale)
        per_scale[scale] = mse

    weights = scale_weights(schedule)
    return LossBreakdown(combine_scale_losses(per_scale, weights), per_scale, weights)


class EMA:
    """Shadow copy of the trainable tensors.

    After every ``update``: ``shadow = decay * shadow + (1 - decay) * live``.
    """

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow: Dict[str, torch.Tensor] = {
            name: p.detach().clone() for name, p in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for name, param in model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def gap(self, model: nn.Module) -> float:
        """L2 distance between shadow and live parameters."""
        total = 0.0
        for name, param in model.named_parameters():
            total += float((self.shadow[name] - param).pow(2).sum())
        return math.sqrt(total)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: Mapping[str, torch.Tensor]) -> None:
        for name, value in state.items():
            self.shadow[name] = value.detach().clone().to(self.shadow[name].dtype)


def lr_factor(step: int, config: TrainConfig) -> float:
    """Multiplier on ``learning_rate`` before optimizer step ``step`` (0-based)."""
    if config.warmup_steps and step < config.warmup_steps:
        return (step + 1) / config.warmup_steps
    if config.lr_schedule == "constant":
        return 1.0
    span = max(1, config.total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    floor = config.min_learning_rate / config.learning_rate if config.learning_rate > 0 else 0.0
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def decay_rate(step: int, config: TrainConfig) -> float:
    """Fraction of every decayed tensor removed before step ``step``.

    ``weight_decay`` is normalized by ``sqrt(total_steps)`` and follows the
    schedule multiplier, but not ``learning_rate``: with a zero learning
    rate the decayed tensors still shrink by ``1 - decay_rate``.
    """
    return config.weight_decay * lr_factor(step, config) / math.sqrt(config.total_steps)


def decay_groups(policy: nn.Module) -> Tuple[List[nn.Parameter], List[nn.Parameter]]:
    """``(decayed, exempt)``: matrices and embeddings decay, vectors do not."""
    decayed = [p for p in policy.parameters() if p.dim() >= 2]
    exempt = [p for p in policy.parameters() if p.dim() < 2]
    return decayed, exempt


@torch.no_grad()
def apply_weight_decay(params: Iterable[nn.Parameter], rate: float) -> None:
    if rate == 0.0:
        return
    for p in params:
        p.mul_(1.0 - rate)


def build_optimizer(
    policy: nn.Module, config: TrainConfig
) -> Tuple[torch.optim.AdamW, torch.optim.lr_scheduler.LambdaLR]:
    """AdamW with the warmup + cosine schedule.

    Weight decay is applied by the trainer through ``apply_weight_decay``,
    so both groups run with AdamW's own ``weight_decay`` at zero.
    """
    decayed, exempt = decay_groups(policy)
    optimizer = torch.optim.AdamW(
        [
            {"params": decayed, "weight_decay": 0.0},
            {"params": exempt, "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
        betas=config.betas,
        weight_decay=0.0,
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda=lambda step: lr_factor(step, config)
    )
    return optimizer, scheduler


def step_generator(seed: int, step: int) -> torch.Generator:
    """Noise stream of one training step, keyed by ``(seed, step)``."""
    state = np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


class BatchOrder:
    """Epoch-wise shuffled sample order from a counter-based generator.

    Batch position ``p = step * B + j`` maps to epoch ``p // N`` and to
    index ``perm(epoch)[p % N]``, where ``perm`` depends only on
    ``(seed, epoch)``. The order is a pure function of its arguments, so
    resuming at any step reproduces it.
    """

    def __init__(self, size: int, batch_size: int, seed: int):
        if size < 1:
            raise SchemaError("cannot draw batches from an empty dataset")
        self.size = size
        self.batch_size = batch_size
        self.seed = seed
        self._perms: Dict[int, np.ndarray] = {}

    def permutation(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, epoch])))
            self._perms = {epoch: rng.permutation(self.size)}
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        positions = step * self.batch_size + np.arange(self.batch_size)
        return np.array(
            [self.permutation(int(p // self.size))[int(p % self.size)] for p in positions],
            dtype=np.int64,
        )


@dataclass
class MetricRecord:
    step: int
    loss: float
    loss_per_scale: Dict[str, float]
    lr: float
    ema_gap: float
    wall_ms: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "loss_per_scale": self.loss_per_scale,
            "lr": self.lr,
            "ema_gap": self.ema_gap,
            "wall_ms": self.wall_ms,
        }


def read_metrics(path: Union[str, Path]) -> List[MetricRecord]:
    with open(path, "r") as f:
        return [MetricRecord(**json.loads(line)) for line in f if line.strip()]


class Trainer:
    """
    Owns the policy, optimizer, schedule and EMA of one training run
    Steps are deterministic given (config, data, step)
    """

    def __init__(
        self,
        config: TrainConfig,
        data: Union[Dataset, TrainingArrays],
        normalizer: Optional[Normalizer] = None,
        resume: Optional[Checkpoint] = None,
    ):
        self.config = config
        arrays = stack_episodes(data) if isinstance(data, Dataset) else data
        self._check_widths(arrays)
        self.normalizer = normalizer or (
            resume.normalizer
            if resume is not None
            else fit_normalizer(arrays.chunks, config.quantile_low, config.quantile_high)
        )
        dtype = config.torch_dtype
        self.features = torch.as_tensor(arrays.features, dtype=dtype)
        self.proprio = torch.as_tensor(arrays.proprio, dtype=dtype)
        self.task_ids = torch.as_tensor(arrays.task_ids, dtype=torch.long)
        self.chunks = self.normalizer.normalize(torch.as_tensor(arrays.chunks, dtype=dtype))

        self.policy = build_policy(config)
        self.optimizer, self.scheduler = build_optimizer(self.policy, config)
        self.decayed, _ = decay_groups(self.policy)
        self.ema = EMA(self.policy, config.ema_rate)
        self.order = BatchOrder(len(arrays), config.batch_size, config.seed)
        self.step = 0
        if resume is not None:
            self._restore(resume)

    def _check_widths(self, arrays: TrainingArrays) -> None:
        cfg = self.config
        expected = {
            "chunk rows": (arrays.chunks.shape[1], cfg.chunk_length),
            "action width": (arrays.chunks.shape[2], cfg.action_dim),
            "feature width": (arrays.features.shape[1], cfg.feature_dim),
            "proprio width": (arrays.proprio.shape[1], cfg.proprio_dim),
        }
        for what, (found, want) in expected.items():
            if found != want:
                raise SchemaError(f"dataset {what} is {found}, config expects {want}")
        if arrays.task_ids.size and int(arrays.task_ids.max()) >= cfg.num_tasks:
            raise SchemaError(
                f"dataset uses task id {int(arrays.task_ids.max())}, config has {cfg.num_tasks} tasks"
            )

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.config.config_hash():
            raise SchemaError(
                f"checkpoint config {ckpt.config_hash} differs from run config "
                f"{self.config.config_hash()}"
            )
        self.policy.load_tensors(ckpt.params)
        self.ema.load_state_dict(ckpt.ema)
        if ckpt.optimizer is not None:
            self.optimizer.load_state_dict(ckpt.optimizer)
        if ckpt.scheduler is not None:
            self.scheduler.load_state_dict(ckpt.scheduler)
        self.step = ckpt.step
        logging.info("Resumed training at step %d", self.step)

    def batch(self, step: int) -> Batch:
        idx = torch.as_tensor(self.order.indices(step))
        return Batch(self.features[idx], self.proprio[idx], self.task_ids[idx], self.chunks[idx])

    def train_step(self) -> MetricRecord:
        start = time.perf_counter()
        lr = self.optimizer.param_groups[0]["lr"]
        breakdown = flow_matching_loss(
            self.policy, self.batch(self.step), step_generator(self.config.seed, self.step)
        )
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        nn.utils.clip_grad_norm_(self.policy.parameters(), self.config.grad_clip)
        apply_weight_decay(self.decayed, decay_rate(self.step, self.config))
        self.optimizer.step()
        self.scheduler.step()
        self.ema.update(self.policy)
        self.step += 1
        summary = breakdown.to_dict()
        return MetricRecord(
            step=self.step,
            loss=summary["loss"],
            loss_per_scale=summary["loss_per_scale"],
            lr=lr,
            ema_gap=self.ema.gap(self.policy),
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )

    def run(
        self,
        steps: Optional[int] = None,
        metrics_path: Optional[Union[str, Path]] = None,
        callback: Optional[Callable[[MetricRecord], None]] = None,
    ) -> List[MetricRecord]:
        """Train until ``self.step`` reaches ``steps`` (default: total_steps)."""
        until = self.config.total_steps if steps is None else steps
        records: List[MetricRecord] = []
        sink = None
        if metrics_path is not None:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            sink = open(metrics_path, "a")
        try:
            self.policy.train()
            while self.step < until:
                record = self.train_step()
                records.append(record)
                if sink is not None:
                    sink.write(json.dumps(record.to_dict()) + "\n")
                if callback is not None:
                    callback(record)
                if record.step % self.config.log_every == 0 or record.step == until:
                    logging.info(
                        "step %d/%d loss %.5f lr %.3g ema_gap %.4g",
                        record.step,
                        until,
                        record.loss,
                        record.lr,
                        record.ema_gap,
                    )
        finally:
            if sink is not None:
                sink.close()
        return records

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            step=self.step,
            normalizer=self.normalizer,
            params={k: v.detach().clone() for k, v in self.policy.named_parameters()},
            ema=self.ema.state_dict(),
            optimizer=self.optimizer.state_dict(),
            scheduler=self.scheduler.state_dict(),
        )


def train(
    config: TrainConfig,
    data: Union[Dataset, TrainingArrays],
    metrics_path: Optional[Union[str, Path]] = None,
    steps: Optional[int] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """
    Train a policy end to end

    Args:
        config: Hyperparameters
        data: Demonstrations (raw actions; normalized here)
        metrics_path: Optional JSONL metrics stream
        steps: Stop at this step instead of ``config.total_steps``
        resume: Continue from a checkpoint of the same config

    Returns:
        Final checkpoint with live and EMA weights
    """
    trainer = Trainer(config, data, resume=resume)
    trainer.run(steps, metrics_path)
    return trainer.checkpoint()


def mean_loss(records: Iterable[MetricRecord]) -> float:
    values = [r.loss for r in records]
    return float(np.mean(values)) if values else float("nan")
