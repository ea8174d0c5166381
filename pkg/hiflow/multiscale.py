"""Parameter-free multi-scale action targets.

``down`` averages equal-width groups of timesteps; ``up`` resamples a
coarse sequence to a finer length by linear interpolation. Neither adds
trainable parameters, and training and inference share this module so
both always use the same alignment convention.

Up alignment: row ``g`` of an ``i``-row input is a sample taken at the
center of its group, normalized time ``(g + 0.5) / i``. Output rows are
read at their own centers; positions before the first center or after
the last one clamp to the end rows. This is torch's
``interpolate(mode="linear", align_corners=False)``.
"""

from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import torch
import torch.nn.functional as F

from .errors import ResampleError, ScheduleError


@dataclass(frozen=True)
class ScaleSchedule:
    """Strictly increasing temporal scales, each dividing the chunk length."""

    scales: Tuple[int, ...]
    chunk_length: int

    def __post_init__(self) -> None:
        scales = tuple(int(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if self.chunk_length < 1:
            raise ScheduleError(f"chunk length must be positive, got {self.chunk_length}")
        if not scales:
            raise ScheduleError("scale schedule is empty")
        if any(s < 1 for s in scales):
            raise ScheduleError(f"scales must be positive: {list(scales)}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ScheduleError(f"scales must be strictly increasing: {list(scales)}")
        if scales[-1] != self.chunk_length:
            raise ScheduleError(
                f"finest scale {scales[-1]} must equal chunk length {self.chunk_length}"
            )
        bad = [s for s in scales if self.chunk_length % s]
        if bad:
            raise ScheduleError(
                f"scales {bad} do not divide chunk length {self.chunk_length}"
            )

    @classmethod
    def dyadic(cls, chunk_length: int) -> "ScaleSchedule":
        """{1, 2, 4, ..., T}; ``T`` must be a power of two."""
        if chunk_length < 1 or chunk_length & (chunk_length - 1):
            raise ScheduleError(
                f"dyadic schedule needs a power-of-two chunk length, got {chunk_length}"
            )
        scales = []
        s = 1
        while s <= chunk_length:
            scales.append(s)
            s *= 2
        return cls(tuple(scales), chunk_length)

    @classmethod
    def parse(cls, text: str, chunk_length: int) -> "ScaleSchedule":
        """Parse ``"1,2,4,8"``."""
        try:
            scales = tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)
        except ValueError as exc:
            raise ScheduleError(f"cannot parse scale list {text!r}") from exc
        return cls(scales, chunk_length)

    def __iter__(self) -> Iterator[int]:
        return iter(self.scales)

    def __len__(self) -> int:
        return len(self.scales)

    @property
    def coarsest(self) -> int:
        return self.scales[0]

    @property
    def finest(self) -> int:
        return self.scales[-1]

    def index(self, scale: int) -> int:
        try:
            return self.scales.index(scale)
        except ValueError as exc:
            raise ScheduleError(f"scale {scale} not in schedule {list(self.scales)}") from exc

    def previous(self, scale: int) -> int:
        """The next-coarser scale; the coarsest scale has none."""
        idx = self.index(scale)
        if idx == 0:
            raise ScheduleError(f"scale {scale} is the coarsest scale")
        return self.scales[idx - 1]


@dataclass
class MultiScaleTargets:
    """Per-scale averaged actions ``{i: (..., i, A)}``."""

    per_scale: Dict[int, torch.Tensor]

    def __getitem__(self, scale: int) -> torch.Tensor:
        return self.per_scale[scale]

    def scales(self) -> List[int]:
        return sorted(self.per_scale)


def _prime_factors(n: int) -> List[int]:
    factors = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return factors


def down(chunk: torch.Tensor, scale: int) -> torch.Tensor:
    """Average ``(..., T, A)`` into ``scale`` equal groups -> ``(..., scale, A)``.

    Groups are reduced one prime factor at a time, smallest first. For
    dyadic ratios that makes every reduction a pairwise halving, so
    ``down(down(x, j), i)`` performs exactly the operations of
    ``down(x, i)`` and the two agree bitwise. With mixed factors they agree
    bitwise when every factor of ``T / j`` is at most every factor of
    ``j / i``; other paths sum in a different order and can differ in the
    last bit.
    """
    if chunk.dim() < 2:
        raise ScheduleError(f"chunk must be (..., T, A), got shape {tuple(chunk.shape)}")
    length = chunk.shape[-2]
    if scale < 1 or length % scale:
        raise ScheduleError(f"scale {scale} does not divide chunk length {length}")

    out = chunk
    for factor in _prime_factors(length // scale):
        rows = out.shape[-2] // factor
        grouped = out.reshape(*out.shape[:-2], rows, factor, out.shape[-1])
        if factor == 2:
            out = (grouped[..., 0, :] + grouped[..., 1, :]) * 0.5
        else:
            out = grouped.mean(dim=-2)
    return out


def up(coarse: torch.Tensor, target_len: int) -> torch.Tensor:
    """Linearly resample ``(..., i, A)`` to ``(..., target_len, A)``."""
    if coarse.dim() < 2:
        raise ResampleError(f"input must be (..., i, A), got shape {tuple(coarse.shape)}")
    rows, width = coarse.shape[-2], coarse.shape[-1]
    if target_len < rows:
        raise ResampleError(f"cannot upsample {rows} rows to {target_len}")
    if target_len == rows:
        return coarse
    lead = coarse.shape[:-2]
    flat = coarse.reshape(-1, rows, width).transpose(1, 2)  # (N, A, i)
    fine = F.interpolate(flat, size=target_len, mode="linear", align_corners=False)
    return fine.transpose(1, 2).reshape(*lead, target_len, width)


def build_targets(chunk: torch.Tensor, schedule: ScaleSchedule) -> MultiScaleTargets:
    """Averaged targets at every scale of the schedule.

    Each coarser target is reduced from the nearest finer target it
    divides, so ``down(targets[j], i) == targets[i]`` holds bitwise along
    that chain whatever the prime factors of the ratios.
    """
    if chunk.shape[-2] != schedule.chunk_length:
        raise ScheduleError(
            f"chunk has {chunk.shape[-2]} rows, schedule expects {schedule.chunk_length}"
        )
    per_scale: Dict[int, torch.Tensor] = {schedule.finest: chunk}
    finer = [schedule.finest]
    for scale in reversed(schedule.scales[:-1]):
        parent = next(j for j in reversed(finer) if j % scale == 0)
        per_scale[scale] = down(per_scale[parent], scale)
        finer.append(scale)
    return MultiScaleTargets(dict(sorted(per_scale.items())))


def upsampled_inputs(
    per_scale: Dict[int, torch.Tensor], schedule: ScaleSchedule
) -> Dict[int, torch.Tensor]:
    """For every non-coarsest scale ``i``: ``Up(per_scale[prev(i)], i)``."""
    return {
        fine: up(per_scale[coarse], fine)
        for coarse, fine in zip(schedule.scales, schedule.scales[1:])
    }


def teacher_forced_inputs(
    targets: MultiScaleTargets, schedule: ScaleSchedule
) -> Dict[int, torch.Tensor]:
    """Ground-truth ScaleAR inputs; detached so they act as constants."""
    return {
        i: x.detach()
        for i, x in upsampled_inputs(targets.per_scale, schedule).items()
    }

