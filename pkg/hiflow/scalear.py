"""ScaleAR: the scale-wise autoregressive transformer.

The input sequence holds one span per scale, coarse to fine. Span ``i``
has ``i`` tokens: the coarsest span carries the task token (broadcast
over its rows), every other span carries the previous scale's actions
upsampled to ``i`` rows and projected to the hidden width. The features
read back from span ``i`` condition the flow network at scale ``i``.

Attention is block-causal over scales, so span ``i`` never sees a finer
span and the conditioning for a scale depends only on coarser scales
and the observation.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import torch
from torch import nn

from .errors import LayoutError, MaskError, NumericError
from .layers import AdaLNBlock, num_heads_for
from .multiscale import ScaleSchedule


@dataclass(frozen=True)
class ScaleLayout:
    """Half-open token span of every scale in the flattened sequence."""

    schedule: ScaleSchedule
    token_spans: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_schedule(cls, schedule: ScaleSchedule) -> "ScaleLayout":
        spans = []
        start = 0
        for scale in schedule:
            spans.append((start, start + scale))
            start += scale
        return cls(schedule, tuple(spans))

    def __post_init__(self) -> None:
        if len(self.token_spans) != len(self.schedule):
            raise LayoutError(
                f"{len(self.token_spans)} spans for {len(self.schedule)} scales"
            )
        cursor = 0
        for scale, (start, end) in zip(self.schedule, self.token_spans):
            if start != cursor or end - start != scale:
                raise LayoutError(
                    f"span {(start, end)} for scale {scale} is not contiguous "
                    f"from {cursor} with length {scale}"
                )
            cursor = end

    @property
    def total_len(self) -> int:
        return self.token_spans[-1][1]

    def span(self, scale: int) -> Tuple[int, int]:
        return self.token_spans[self.schedule.index(scale)]

    def level_ids(self) -> torch.Tensor:
        """Scale index (0 = coarsest) of every flattened position."""
        return torch.cat(
            [
                torch.full((end - start,), level, dtype=torch.long)
                for level, (start, end) in enumerate(self.token_spans)
            ]
        )

    def prefix_scales(self, length: int) -> Tuple[int, ...]:
        """Scales whose spans are complete within the first ``length`` tokens."""
        ends = [end for _, end in self.token_spans]
        if length not in ends:
            raise LayoutError(f"sequence length {length} does not end on a span boundary {ends}")
        return self.schedule.scales[: ends.index(length) + 1]


@dataclass(frozen=True)
class ScaleMask:
    """``allow[q, k]``: may query ``q`` attend to key ``k``."""

    allow: torch.Tensor

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScaleMask) and torch.equal(self.allow, other.allow)

    def __hash__(self) -> int:
        return hash(tuple(self.allow.flatten().tolist()))

    def prefix(self, length: int) -> torch.Tensor:
        return self.allow[:length, :length]


def build_mask(layout: ScaleLayout, strict: bool = False) -> ScaleMask:
    """Block-causal mask over scales.

    Default: a token may read every token of its own scale and of all
    coarser scales. ``strict`` forbids same-scale attention except to the
    token itself.
    """
    levels = layout.level_ids()
    q_level = levels.view(-1, 1)
    k_level = levels.view(1, -1)
    if strict:
        allow = (k_level < q_level) | torch.eye(len(levels), dtype=torch.bool)
    else:
        allow = k_level <= q_level
    return ScaleMask(allow)


class ScaleAR(nn.Module):
    """AdaLN transformer over the cross-scale token sequence."""

    def __init__(
        self,
        schedule: ScaleSchedule,
        action_dim: int,
        hidden_dim: int,
        depth: int,
        head_dim: int = 64,
        mlp_ratio: float = 4.0,
        strict_mask: bool = False,
    ):
        super().__init__()
        self.schedule = schedule
        self.layout = ScaleLayout.from_schedule(schedule)
        self.hidden_dim = hidden_dim
        self.strict_mask = strict_mask
        init_std = (1.0 / hidden_dim / 3) ** 0.5

        # One projection for every scale's upsampled actions.
        self.action_proj = nn.Linear(action_dim, hidden_dim)
        self.pos_embed = nn.Parameter(torch.empty(1, self.layout.total_len, hidden_dim))
        nn.init.trunc_normal_(self.pos_embed, std=init_std)
        self.level_embed = nn.Embedding(len(schedule), hidden_dim)
        nn.init.trunc_normal_(self.level_embed.weight, std=init_std)

        heads = num_heads_for(hidden_dim, head_dim)
        self.blocks = nn.ModuleList(
            [AdaLNBlock(hidden_dim, hidden_dim, heads, mlp_ratio) for _ in range(depth)]
        )
        self.register_buffer(
            "level_ids", self.layout.level_ids(), persistent=False
        )
        self.register_buffer(
            "mask", build_mask(self.layout, strict=strict_mask).allow, persistent=False
        )

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def assemble_input(
        self,
        task_tok: torch.Tensor,
        per_scale_inputs: Mapping[int, torch.Tensor],
        upto: Optional[int] = None,
    ) -> torch.Tensor:
        """Build ``z`` for every scale up to ``upto`` (default: all).

        ``task_tok`` is ``(B, 1, H)``; ``per_scale_inputs[i]`` is the
        ``(B, i, A)`` upsampled action input of scale ``i``. Positional and
        scale embeddings are added here.
        """
        scales = self.schedule.scales
        last = self.schedule.index(upto if upto is not None else self.schedule.finest)
        batch = task_tok.shape[0]

        pieces = [task_tok.expand(batch, scales[0], self.hidden_dim)]
        for scale in scales[1 : last + 1]:
            if scale not in per_scale_inputs:
                raise LayoutError(f"missing ScaleAR input for scale {scale}")
            x = per_scale_inputs[scale]
            if x.shape[-2] != scale:
                raise LayoutError(
                    f"input for scale {scale} has {x.shape[-2]} rows, span needs {scale}"
                )
            pieces.append(self.action_proj(x))
        z = torch.cat(pieces, dim=1)
        length = z.shape[1]
        return z + self.pos_embed[:, :length] + self.level_embed(self.level_ids[:length])

    def forward(
        self,
        z: torch.Tensor,
        c_global: torch.Tensor,
        mask: Optional[ScaleMask] = None,
    ) -> Dict[int, torch.Tensor]:
        """Return ``{i: (B, i, H)}`` for every scale whose span ``z`` covers.

        ``mask`` overrides the mask built at construction; it must cover the
        full layout and is cut down to the prefix ``z`` spans.
        """
        length = z.shape[1]
        scales = self.layout.prefix_scales(length)
        if mask is None:
            allow = self.mask[:length, :length]
        else:
            if tuple(mask.allow.shape) != (self.layout.total_len,) * 2:
                raise MaskError(
                    f"mask shape {tuple(mask.allow.shape)} does not match "
                    f"sequence length {self.layout.total_len}"
                )
            allow = mask.prefix(length).to(z.device)
        cond = c_global.unsqueeze(1)
        h = z
        for idx, block in enumerate(self.blocks):
            h = block(h, cond, allow)
            if not torch.isfinite(h).all():
                logging.error("ScaleAR produced non-finite activations in block %d", idx)
                raise NumericError("non-finite ScaleAR activations", block=idx)
        return {
            scale: h[:, start:end]
            for scale, (start, end) in zip(scales, self.layout.token_spans)
        }
