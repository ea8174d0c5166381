"""Quantile action normalization to [-1, 1]."""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .errors import DimensionError, SchemaError

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class Normalizer:
    """Per-dimension affine map sending ``[low, high]`` onto ``[-1, 1]``.

    Dimensions whose bounds coincide carry no information; they map to 0
    and denormalize back to the bound.
    """

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self) -> None:
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise SchemaError(
                f"normalizer bounds must be equal-length vectors, got "
                f"{self.low.shape} and {self.high.shape}"
            )
        if np.any(self.high < self.low):
            raise SchemaError("normalizer upper bound below lower bound")

    @property
    def dim(self) -> int:
        return int(self.low.shape[0])

    @property
    def degenerate(self) -> np.ndarray:
        return self.high - self.low <= 1e-12

    def _bounds(self, like: ArrayLike):
        if like.shape[-1] != self.dim:
            raise DimensionError(
                f"action width {like.shape[-1]} does not match normalizer width {self.dim}"
            )
        low, high = self.low, self.high
        span = np.where(self.degenerate, 1.0, high - low)
        if isinstance(like, torch.Tensor):
            as_t = lambda a: torch.as_tensor(a, dtype=like.dtype, device=like.device)  # noqa: E731
            return as_t(low), as_t(span), as_t(self.degenerate.astype(np.float64))
        return low, span, self.degenerate.astype(np.float64)

    def normalize(self, actions: ArrayLike, clamp: bool = True) -> ArrayLike:
        low, span, flat = self._bounds(actions)
        out = (actions - low) / span * 2.0 - 1.0
        out = out * (1.0 - flat)
        if clamp:
            out = out.clamp(-1.0, 1.0) if isinstance(out, torch.Tensor) else np.clip(out, -1.0, 1.0)
        return out

    def denormalize(self, values: ArrayLike) -> ArrayLike:
        low, span, flat = self._bounds(values)
        return (values + 1.0) * 0.5 * span * (1.0 - flat) + low

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(np.asarray(data["low"]), np.asarray(data["high"]))


def fit_normalizer(actions: np.ndarray, low_q: float = 0.01, high_q: float = 0.99) -> Normalizer:
    """Fit bounds from every action row of ``(..., A)``."""
    rows = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
    if rows.shape[0] < 2:
        raise SchemaError(f"fitting a normalizer needs at least two action rows, got {rows.shape[0]}")
    low = np.quantile(rows, low_q, axis=0)
    high = np.quantile(rows, high_q, axis=0)
    norm = Normalizer(low, high)
    for dim in np.flatnonzero(norm.degenerate):
        logging.warning("Action dimension %d is constant (%.6g); it normalizes to 0", dim, low[dim])
    return norm
