"""ActionFlowNet: one conditional flow-matching network for every scale.

Straight-line probability path between data (tau = 0) and Gaussian
noise (tau = 1):

    x_tau = (1 - tau) * a + tau * eps,    v = eps - a

The network predicts ``v`` from ``(x_tau, tau, s)`` where ``s`` holds one
conditioning row per generated row. Each position's AdaLN parameters
come from the flow-time embedding plus its own conditioning row, so
neighbouring timesteps can be modulated differently. The sequence length
is the scale, so one parameter set serves every scale.
"""

from dataclasses import dataclass
from typing import Union

import torch
from torch import nn

from .errors import ConditioningError, DimensionError, NumericError, RangeError
from .layers import AdaLNBlock, AdaLNHead, TimestepEmbedding, num_heads_for, position_features

TauLike = Union[float, torch.Tensor]


def _check_tau(tau: TauLike) -> None:
    values = tau if isinstance(tau, torch.Tensor) else torch.tensor(float(tau))
    if not bool(((values >= 0) & (values <= 1)).all()):
        raise RangeError(f"flow time must lie in [0, 1], got {values.tolist()}")


@dataclass
class FlowState:
    """Noisy actions ``x_tau`` ``(B, i, A)`` at flow time ``tau``."""

    x_tau: torch.Tensor
    tau: TauLike

    def __post_init__(self) -> None:
        _check_tau(self.tau)

    @property
    def rows(self) -> int:
        return self.x_tau.shape[-2]

    def tau_tensor(self) -> torch.Tensor:
        """``tau`` as a ``(B,)`` tensor matching ``x_tau``."""
        batch = self.x_tau.shape[0]
        tau = torch.as_tensor(self.tau, dtype=self.x_tau.dtype, device=self.x_tau.device)
        return tau.expand(batch) if tau.dim() == 0 else tau


def _tau_for(tau: TauLike, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-example ``(B,)`` tau against ``(B, ..., A)``."""
    t = torch.as_tensor(tau, dtype=like.dtype, device=like.device)
    if t.dim() == 1:
        t = t.view(-1, *([1] * (like.dim() - 1)))
    return t


def interpolate(target: torch.Tensor, noise: torch.Tensor, tau: TauLike) -> FlowState:
    """``(1 - tau) * target + tau * noise``."""
    if target.shape != noise.shape:
        raise DimensionError(
            f"target {tuple(target.shape)} and noise {tuple(noise.shape)} differ"
        )
    _check_tau(tau)
    t = _tau_for(tau, target)
    return FlowState((1 - t) * target + t * noise, tau)


def velocity_target(target: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Constant velocity of the straight path: ``noise - target``."""
    if target.shape != noise.shape:
        raise DimensionError(
            f"target {tuple(target.shape)} and noise {tuple(noise.shape)} differ"
        )
    return noise - target


class ActionFlowNet(nn.Module):
    """Lightweight AdaLN transformer predicting flow velocities."""

    def __init__(
        self,
        action_dim: int,
        hidden_dim: int,
        depth: int,
        head_dim: int = 64,
        mlp_ratio: float = 4.0,
        time_embed_dim: int = 128,
        use_position: bool = True,
    ):
        super().__init__()
        self.action_dim = action_dim
        self.hidden_dim = hidden_dim
        self.use_position = use_position
        self.in_proj = nn.Linear(action_dim, hidden_dim)
        self.time_embed = TimestepEmbedding(hidden_dim, freq_dim=time_embed_dim)
        self.cond_proj = nn.Linear(hidden_dim, hidden_dim)
        heads = num_heads_for(hidden_dim, head_dim)
        self.blocks = nn.ModuleList(
            [AdaLNBlock(hidden_dim, hidden_dim, heads, mlp_ratio) for _ in range(depth)]
        )
        self.head = AdaLNHead(hidden_dim, hidden_dim, action_dim)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor, tau: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """``x`` ``(B, i, A)``, ``tau`` ``(B,)``, ``cond`` ``(B, i, H)`` -> ``(B, i, A)``."""
        if x.dim() != 3 or x.shape[-1] != self.action_dim:
            raise DimensionError(
                f"flow input must be (B, i, {self.action_dim}), got {tuple(x.shape)}"
            )
        if cond.shape[:2] != x.shape[:2]:
            raise ConditioningError(
                f"conditioning {tuple(cond.shape)} does not match rows of {tuple(x.shape)}"
            )
        rows = x.shape[1]
        h = self.in_proj(x)
        if self.use_position:
            h = h + position_features(rows, self.hidden_dim, h.dtype, h.device)
        c = self.time_embed(tau).unsqueeze(1) + self.cond_proj(cond)
        # every row attends to every row of its own scale
        mask = torch.ones(rows, rows, dtype=torch.bool, device=x.device)
        for idx, block in enumerate(self.blocks):
            h = block(h, c, mask)
            if not torch.isfinite(h).all():
                raise NumericError("non-finite ActionFlowNet activations", block=idx)
        out = self.head(h, c)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite velocity prediction")
        return out

    def predict_velocity(self, state: FlowState, cond: torch.Tensor) -> torch.Tensor:
        """``f_theta(x_tau, tau, s)`` for a ``FlowState``."""
        if cond.shape[-2] != state.rows:
            raise ConditioningError(
                f"{cond.shape[-2]} conditioning rows for {state.rows} action rows"
            )
        return self(state.x_tau, state.tau_tensor(), cond)
