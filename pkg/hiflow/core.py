#!/usr/bin/env python3
"""
HiFlow Core
Composes the observation encoder, ScaleAR and ActionFlowNet into one policy
"""

import logging
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Tuple

import torch
from torch import nn

from .actionflow import ActionFlowNet
from .conditioning import ObservationEncoder
from .config import TrainConfig
from .errors import SchemaError
from .scalear import ScaleAR, ScaleMask, build_mask

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

# parameter-name prefix -> group, first match wins
_GROUP_PREFIXES: Tuple[Tuple[str, str], ...] = (
    ("encoder.task_embedding.", "task_embedding"),
    ("encoder.", "encoder"),
    ("scalear.action_proj.", "projections"),
    ("flownet.in_proj.", "projections"),
    ("flownet.head.linear.", "projections"),
    ("scalear.", "scalear"),
    ("flownet.", "flownet"),
)

PARAMETER_GROUPS = ("encoder", "task_embedding", "scalear", "flownet", "projections")


class HiFlowPolicy(nn.Module):
    """
    Coarse-to-fine action policy
    Owns every trainable tensor; training and sampling drive it from outside
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.schedule = config.schedule()

        self.encoder = ObservationEncoder(
            feature_dim=config.feature_dim,
            proprio_dim=config.proprio_dim,
            num_tasks=config.num_tasks,
            hidden_dim=config.hidden_dim,
        )
        self.scalear = ScaleAR(
            self.schedule,
            action_dim=config.action_dim,
            hidden_dim=config.hidden_dim,
            depth=config.scalear_depth,
            head_dim=config.head_dim,
            mlp_ratio=config.mlp_ratio,
            strict_mask=config.strict_mask,
        )
        self.flownet = ActionFlowNet(
            action_dim=config.action_dim,
            hidden_dim=config.hidden_dim,
            depth=config.flow_depth,
            head_dim=config.head_dim,
            mlp_ratio=config.mlp_ratio,
            time_embed_dim=config.time_embed_dim,
            use_position=config.flow_pos_embed,
        )

    @property
    def layout(self):
        return self.scalear.layout

    @property
    def mask(self) -> ScaleMask:
        return build_mask(self.layout, strict=self.config.strict_mask)

    def encode_observation(
        self, features: torch.Tensor, proprio: torch.Tensor, task_ids: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(c_global, c_task)``."""
        return self.encoder(features, proprio, task_ids)

    def scale_features(
        self,
        c_global: torch.Tensor,
        c_task: torch.Tensor,
        per_scale_inputs: Mapping[int, torch.Tensor],
        upto: Optional[int] = None,
    ) -> Dict[int, torch.Tensor]:
        """One ScaleAR pass: per-scale conditioning ``{i: (B, i, H)}``."""
        z = self.scalear.assemble_input(c_task, per_scale_inputs, upto=upto)
        return self.scalear(z, c_global)

    def condition(
        self,
        features: torch.Tensor,
        proprio: torch.Tensor,
        task_ids: torch.Tensor,
        per_scale_inputs: Mapping[int, torch.Tensor],
    ) -> Dict[int, torch.Tensor]:
        """Conditioning for every scale from (teacher-forced) inputs."""
        c_global, c_task = self.encode_observation(features, proprio, task_ids)
        return self.scale_features(c_global, c_task, per_scale_inputs)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Partition of the trainable tensors by component."""
        groups: Dict[str, List[nn.Parameter]] = {name: [] for name in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            for prefix, group in _GROUP_PREFIXES:
                if name.startswith(prefix):
                    groups[group].append(param)
                    break
        return groups

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", use_ema: bool = True) -> "HiFlowPolicy":
        """Rebuild a policy with the checkpoint's EMA or live weights."""
        policy = build_policy(ckpt.config)
        state = ckpt.ema if use_ema else ckpt.params
        policy.load_tensors(state)
        logging.info(
            "Loaded %s weights from checkpoint at step %d (config %s)",
            "EMA" if use_ema else "live",
            ckpt.step,
            ckpt.config_hash,
        )
        return policy

    def load_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        """Copy named tensors into the parameters; names must match exactly."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise SchemaError(
                f"parameter names disagree (missing {missing[:5]}, unexpected {extra[:5]})"
            )
        with torch.no_grad():
            for name, param in own.items():
                value = tensors[name]
                if tuple(value.shape) != tuple(param.shape):
                    raise SchemaError(
                        f"{name}: stored shape {tuple(value.shape)}, model expects {tuple(param.shape)}"
                    )
                param.copy_(value.to(param.dtype))


def build_policy(config: TrainConfig) -> HiFlowPolicy:
    """
    Construct a policy deterministically from its config

    Initialisation draws from a forked torch RNG seeded with ``config.seed``,
    so building a policy never disturbs the caller's global generator.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        policy = HiFlowPolicy(config)
    policy = policy.to(config.torch_dtype)
    logging.info(
        "Built HiFlow policy: %d parameters, scales %s, config %s",
        policy.num_parameters(),
        list(config.scales),
        config.config_hash(),
    )
    return policy
