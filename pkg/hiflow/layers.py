"""Transformer building blocks shared by ScaleAR and ActionFlowNet.

Both networks use the same AdaLN-Zero block; they differ only in the
shape of the conditioning they feed it. ScaleAR passes one global vector
per example (``(B, 1, C)``, broadcast over tokens) while ActionFlowNet
passes one vector per token (``(B, L, C)``), which gives every temporal
position its own shift, scale and gate.
"""

import math
from typing import Optional, Tuple

import torch
from torch import nn

from .numerics import layer_norm, masked_attention


def num_heads_for(width: int, head_dim: int = 64) -> int:
    """Heads of ``head_dim`` channels; at least one, always dividing ``width``."""
    heads = max(1, width // head_dim)
    while width % heads:
        heads -= 1
    return heads


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention over a boolean ``L x L`` mask."""

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        if width % num_heads:
            raise ValueError(f"width {width} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape
        qkv = self.qkv(x).view(batch, length, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (B, heads, L, hd)
        out = masked_attention(q, k, v, mask)
        out = out.transpose(1, 2).reshape(batch, length, width)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class AdaLNModulation(nn.Module):
    """Map a conditioning vector to ``chunks`` modulation tensors.

    The projection starts at zero, so shifts, scales and gates are all
    zero at initialization (scale enters as ``1 + scale``).
    """

    def __init__(self, cond_dim: int, width: int, chunks: int):
        super().__init__()
        self.chunks = chunks
        self.act = nn.SiLU()
        self.linear = nn.Linear(cond_dim, chunks * width)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, cond: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        return self.linear(self.act(cond)).chunk(self.chunks, dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return layer_norm(x) * (1 + scale) + shift


class AdaLNBlock(nn.Module):
    """Pre-norm transformer block with AdaLN-Zero modulation."""

    def __init__(
        self, width: int, cond_dim: int, num_heads: int, mlp_ratio: float = 4.0
    ):
        super().__init__()
        self.attn = MaskedSelfAttention(width, num_heads)
        self.mlp = FeedForward(width, mlp_ratio)
        self.modulation = AdaLNModulation(cond_dim, width, chunks=6)

    def forward(
        self, x: torch.Tensor, cond: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """``cond`` is ``(B, 1, C)`` (global) or ``(B, L, C)`` (per position)."""
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(cond)
        x = x + gate_a * self.attn(modulate(x, shift_a, scale_a), mask)
        x = x + gate_m * self.mlp(modulate(x, shift_m, scale_m))
        return x


class AdaLNHead(nn.Module):
    """Final modulated norm followed by a linear read-out."""

    def __init__(self, width: int, cond_dim: int, out_dim: int, zero_init: bool = True):
        super().__init__()
        self.modulation = AdaLNModulation(cond_dim, width, chunks=2)
        self.linear = nn.Linear(width, out_dim)
        if zero_init:
            nn.init.zeros_(self.linear.weight)
            nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(cond)
        return self.linear(modulate(x, shift, scale))


def sinusoidal_features(
    values: torch.Tensor, dim: int, max_period: float = 10000.0
) -> torch.Tensor:
    """``(..., )`` real values -> ``(..., dim)`` cos/sin features."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period)
        * torch.arange(half, dtype=values.dtype, device=values.device)
        / half
    )
    args = values.unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    """Flow time in [0, 1] -> sinusoidal features -> 2-layer MLP."""

    def __init__(self, out_dim: int, freq_dim: int = 128, time_scale: float = 1000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.time_scale = time_scale
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        feats = sinusoidal_features(tau * self.time_scale, self.freq_dim)
        return self.mlp(feats.to(self.mlp[0].weight.dtype))


def position_features(
    length: int, dim: int, dtype: torch.dtype, device: Optional[torch.device] = None
) -> torch.Tensor:
    """Fixed features of group-center times ``(g + 0.5) / length``.

    Scale-independent: row ``g`` of an ``i``-token sequence describes the
    same temporal window whatever ``i`` is.
    """
    centers = (torch.arange(length, dtype=dtype, device=device) + 0.5) / length
    return sinusoidal_features(centers * 100.0, dim)
