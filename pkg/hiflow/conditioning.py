"""Observation encoder: features + proprio + task -> global condition.

Desk-scale tasks have no images, so the vision backbone is a plain MLP
over low-dimensional features. Anything exposing ``encode`` and
``task_token`` with the same signatures can stand in for it inside
``HiFlowPolicy``.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import SchemaError, TaskLookupError


@dataclass(frozen=True)
class Observation:
    """One observation: feature vector, proprioceptive state, task id."""

    features: np.ndarray
    proprio: np.ndarray
    task_id: int = 0

    def validate(self, feature_dim: int, proprio_dim: int, num_tasks: int) -> None:
        if self.features.shape != (feature_dim,):
            raise SchemaError(
                f"observation features have shape {self.features.shape}, "
                f"expected ({feature_dim},)"
            )
        if self.proprio.shape != (proprio_dim,):
            raise SchemaError(
                f"observation proprio has shape {self.proprio.shape}, "
                f"expected ({proprio_dim},)"
            )
        if not 0 <= self.task_id < num_tasks:
            raise TaskLookupError(f"task id {self.task_id} outside [0, {num_tasks})")


def collate(
    observations: Sequence[Observation],
    dtype: torch.dtype = torch.float32,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack observations into ``(features, proprio, task_ids)`` tensors."""
    features = torch.as_tensor(np.stack([o.features for o in observations]), dtype=dtype)
    proprio = torch.as_tensor(np.stack([o.proprio for o in observations]), dtype=dtype)
    task_ids = torch.as_tensor([o.task_id for o in observations], dtype=torch.long)
    return features, proprio, task_ids


class ObservationEncoder(nn.Module):
    """MLP fusing observation features, proprio and a task embedding.

    Two hidden layers of width ``hidden_dim`` with SiLU, then a linear
    output layer of the same width. The task embedding table doubles as
    the ScaleAR task token.
    """

    def __init__(
        self,
        feature_dim: int,
        proprio_dim: int,
        num_tasks: int,
        hidden_dim: int,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.proprio_dim = proprio_dim
        self.num_tasks = num_tasks
        self.hidden_dim = hidden_dim
        self.task_embedding = nn.Embedding(num_tasks, hidden_dim)
        nn.init.normal_(self.task_embedding.weight, std=0.02)
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim + proprio_dim + hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    @property
    def output_layer(self) -> nn.Linear:
        layer = self.mlp[-1]
        assert isinstance(layer, nn.Linear)
        return layer

    def _check_task_ids(self, task_ids: torch.Tensor) -> None:
        if task_ids.numel() and (
            int(task_ids.min()) < 0 or int(task_ids.max()) >= self.num_tasks
        ):
            raise TaskLookupError(
                f"task ids {task_ids.tolist()} outside [0, {self.num_tasks})"
            )

    def task_token(self, task_ids: torch.Tensor) -> torch.Tensor:
        """``(B,)`` ids -> ``(B, 1, H)`` rows of the embedding table."""
        self._check_task_ids(task_ids)
        return self.task_embedding(task_ids).unsqueeze(1)

    def encode(
        self, features: torch.Tensor, proprio: torch.Tensor, task_ids: torch.Tensor
    ) -> torch.Tensor:
        """``(B, F)``, ``(B, P)``, ``(B,)`` -> global condition ``(B, H)``."""
        if features.shape[-1] != self.feature_dim or proprio.shape[-1] != self.proprio_dim:
            raise SchemaError(
                f"observation widths ({features.shape[-1]}, {proprio.shape[-1]}) "
                f"do not match configured ({self.feature_dim}, {self.proprio_dim})"
            )
        self._check_task_ids(task_ids)
        task = self.task_embedding(task_ids)
        return self.mlp(torch.cat([features, proprio, task], dim=-1))

    def forward(
        self, features: torch.Tensor, proprio: torch.Tensor, task_ids: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(c_global, c_task)``."""
        return self.encode(features, proprio, task_ids), self.task_token(task_ids)
