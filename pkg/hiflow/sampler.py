"""Coarse-to-fine sampling.

For every scale, coarsest first: one ScaleAR pass over the prefix of the
sequence produces the scale's conditioning, then ``n_steps`` Euler steps
carry Gaussian noise at ``tau = 1`` to an action sample at ``tau = 0``.
The sample is upsampled to the next scale's length and becomes that
scale's ScaleAR input. Only the finest sample leaves normalized space.
"""

import contextlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .conditioning import Observation, collate
from .core import HiFlowPolicy
from .errors import ConfigError, NumericError, RangeError, TraceError
from .multiscale import up
from .normalization import Normalizer

VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]


def euler_integrate(velocity_fn: VelocityFn, x_init: torch.Tensor, n_steps: int) -> torch.Tensor:
    """Integrate ``dx/dtau = v`` from ``tau = 1`` down to ``tau = 0``.

    Step ``k`` (1-based) evaluates ``v`` at ``tau = 1 - (k - 1) / n`` and
    moves ``x <- x - v / n``.

    The integrator is agnostic to the model: ``velocity_fn`` carries the
    scale's conditioning and the flow network's parameters (``sample_chunk``
    binds both in a closure), and ``x_init`` is the starting noise, already
    drawn from the caller's generator. Nothing here consumes randomness.
    """
    if n_steps < 1:
        raise RangeError(f"n_steps must be at least 1, got {n_steps}")
    dt = 1.0 / n_steps
    x = x_init
    for k in range(n_steps):
        tau = 1.0 - k / n_steps
        x = x - dt * velocity_fn(x, tau)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite state during Euler integration", step=k + 1)
    return x


class ForwardCounter:
    """Counts ScaleAR and ActionFlowNet forward calls while active."""

    def __init__(self, policy: HiFlowPolicy):
        self.policy = policy
        self.scalear = 0
        self.flownet = 0
        self._handles: List[Any] = []

    @property
    def total(self) -> int:
        return self.scalear + self.flownet

    def _bump(self, attr: str) -> Callable[..., None]:
        def hook(*_: Any) -> None:
            setattr(self, attr, getattr(self, attr) + 1)

        return hook

    def __enter__(self) -> "ForwardCounter":
        self._handles = [
            self.policy.scalear.register_forward_hook(self._bump("scalear")),
            self.policy.flownet.register_forward_hook(self._bump("flownet")),
        ]
        return self

    def __exit__(self, *exc: Any) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []


@dataclass
class SampleTrace:
    """Every scale's sample for a batch of observations.

    ``per_scale[i]`` is ``(B, i, A)`` in normalized units; ``chunk`` is
    the finest sample mapped back to action units, ``(B, T, A)``.
    """

    scales: List[int]
    chunk_length: int
    per_scale: Dict[int, np.ndarray]
    chunk: np.ndarray
    n_steps: int
    scalear_passes: int = 0
    flow_passes: int = 0
    wall_ms: Dict[int, float] = field(default_factory=dict)

    @property
    def forward_passes(self) -> int:
        return self.scalear_passes + self.flow_passes

    @property
    def complete(self) -> bool:
        return all(s in self.per_scale for s in self.scales)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "chunk_length": self.chunk_length,
            "n_steps": self.n_steps,
            "per_scale": {str(i): a.tolist() for i, a in sorted(self.per_scale.items())},
            "chunk": self.chunk.tolist(),
            "forward_passes": self.forward_passes,
            "scalear_passes": self.scalear_passes,
            "flow_passes": self.flow_passes,
            "wall_ms": {str(i): t for i, t in sorted(self.wall_ms.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SampleTrace":
        return cls(
            scales=[int(s) for s in data["scales"]],
            chunk_length=int(data["chunk_length"]),
            per_scale={int(i): np.asarray(a) for i, a in data["per_scale"].items()},
            chunk=np.asarray(data["chunk"]),
            n_steps=int(data["n_steps"]),
            scalear_passes=int(data.get("scalear_passes", 0)),
            flow_passes=int(data.get("flow_passes", 0)),
            wall_ms={int(i): float(t) for i, t in data.get("wall_ms", {}).items()},
        )


def dump_trace(trace: SampleTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(trace.to_dict(), f, indent=2)
    return path


def load_trace(path: Union[str, Path]) -> SampleTrace:
    with open(path, "r") as f:
        return SampleTrace.from_dict(json.load(f))


def expected_forward_passes(num_scales: int, n_steps: int) -> int:
    return num_scales * (1 + n_steps)


@torch.no_grad()
def sample_chunk(
    policy: HiFlowPolicy,
    normalizer: Normalizer,
    observations: Union[Observation, Sequence[Observation]],
    n_steps: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    seed: int = 0,
    instrument: bool = True,
) -> SampleTrace:
    """Generate one action chunk per observation, coarse to fine.

    Noise is drawn from ``generator`` (or a fresh one seeded with
    ``seed``) in ascending scale order. ``instrument`` counts forward
    passes with module hooks; turn it off when several threads sample
    from one policy, otherwise their counts mix.
    """
    obs = [observations] if isinstance(observations, Observation) else list(observations)
    cfg = policy.config
    n_steps = cfg.n_steps if n_steps is None else n_steps
    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    dtype = cfg.torch_dtype
    for o in obs:
        o.validate(cfg.feature_dim, cfg.proprio_dim, cfg.num_tasks)
    features, proprio, task_ids = collate(obs, dtype)
    batch = len(obs)
    schedule = policy.schedule

    policy.eval()
    samples: Dict[int, torch.Tensor] = {}
    inputs: Dict[int, torch.Tensor] = {}
    wall: Dict[int, float] = {}
    counter = ForwardCounter(policy)
    with counter if instrument else contextlib.nullcontext():
        c_global, c_task = policy.encode_observation(features, proprio, task_ids)
        for scale in schedule:
            start = time.perf_counter()
            if scale != schedule.coarsest:
                inputs[scale] = up(samples[schedule.previous(scale)], scale)
            cond = policy.scale_features(c_global, c_task, inputs, upto=scale)[scale]

            def velocity(x: torch.Tensor, tau: float, cond: torch.Tensor = cond) -> torch.Tensor:
                return policy.flownet(x, torch.full((batch,), tau, dtype=dtype), cond)

            noise = torch.randn((batch, scale, cfg.action_dim), generator=generator, dtype=dtype)
            try:
                samples[scale] = euler_integrate(velocity, noise, n_steps)
            except NumericError as exc:
                raise NumericError(
                    "non-finite state during Euler integration", scale=scale, step=exc.step
                ) from exc
            wall[scale] = (time.perf_counter() - start) * 1000.0

    finest = samples[schedule.finest].double().numpy()
    trace = SampleTrace(
        scales=list(schedule.scales),
        chunk_length=schedule.chunk_length,
        per_scale={i: s.double().numpy() for i, s in samples.items()},
        chunk=normalizer.denormalize(finest),
        n_steps=n_steps,
        scalear_passes=counter.scalear,
        flow_passes=counter.flownet,
        wall_ms=wall,
    )
    logging.debug(
        "Sampled %d chunk(s) with %d forward passes in %.1f ms",
        batch,
        trace.forward_passes,
        sum(wall.values()),
    )
    return trace


def cumulative_panel(tokens: np.ndarray, chunk_length: int) -> np.ndarray:
    """Cumulative displacement path of ``(i, A)`` per-step mean actions.

    Token ``g`` stands for ``T / i`` steps, so it moves the path by
    ``(T / i) * tokens[g]``. The path starts at the origin.
    """
    steps = chunk_length / tokens.shape[0]
    path = np.cumsum(tokens * steps, axis=0)
    return np.vstack([np.zeros((1, tokens.shape[1])), path])


def plot_description(
    trace: SampleTrace, normalizer: Optional[Normalizer] = None, index: int = 0
) -> dict:
    """Per-scale panels of the cumulative displacement for sample ``index``."""
    missing = [s for s in trace.scales if s not in trace.per_scale]
    if missing:
        raise TraceError(f"trace has no samples for scales {missing}")
    panels = []
    for scale in trace.scales:
        tokens = np.asarray(trace.per_scale[scale][index], dtype=np.float64)
        if normalizer is not None:
            tokens = normalizer.denormalize(tokens)
        points = cumulative_panel(tokens, trace.chunk_length)
        panels.append(
            {
                "scale": scale,
                "points": points.tolist(),
                "token_boundaries": list(range(scale + 1)),
                "start": points[0].tolist(),
                "end": points[-1].tolist(),
            }
        )
    return {
        "title": "coarse-to-fine cumulative displacement",
        "chunk_length": trace.chunk_length,
        "scales": list(trace.scales),
        "panels": panels,
    }


def _render_image(description: dict, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError(
            "image output needs matplotlib (install extra 'plot'); use a .json path instead"
        ) from exc

    panels = description["panels"]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2), squeeze=False)
    for ax, panel in zip(axes[0], panels):
        pts = np.asarray(panel["points"])
        xs, ys = (pts[:, 0], pts[:, 1]) if pts.shape[1] > 1 else (np.arange(len(pts)), pts[:, 0])
        ax.plot(xs, ys, "-", color="tab:blue")
        ax.plot(xs, ys, "o", color="tab:blue", markersize=3)
        ax.plot(xs[0], ys[0], "s", color="tab:green", label="start")
        ax.plot(xs[-1], ys[-1], "*", color="tab:red", markersize=10, label="end")
        ax.set_title(f"scale {panel['scale']}")
        ax.set_aspect("equal", adjustable="datalim")
    axes[0][0].legend(loc="best", fontsize=7)
    fig.suptitle(description["title"])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trace_to_plot(
    trace: SampleTrace,
    path: Union[str, Path],
    normalizer: Optional[Normalizer] = None,
    index: int = 0,
) -> Path:
    """Write the per-scale figure: ``.json`` as a description, else an image."""
    path = Path(path)
    description = plot_description(trace, normalizer, index)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        with open(path, "w") as f:
            json.dump(description, f, indent=2)
    else:
        _render_image(description, path)
    return path
