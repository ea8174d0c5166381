"""Dense tensor primitives and the finite-difference gradient oracle.

Tensors are ``torch.Tensor`` objects and differentiation is torch's
reverse-mode tape; this module adds the shape contracts the two
transformers rely on, the block-masked attention kernel, and
``grad_check``, which compares the tape against central differences.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import DimensionError, MaskError, NumericError

# Relative error denominators never drop below this; gradients smaller
# than it are compared in absolute terms.
GRAD_CHECK_FLOOR = 1e-6


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to ``threads`` intra-op threads and deterministic kernels."""
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def _shape(t: torch.Tensor) -> Tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {_shape(a)} x {_shape(b)}"
        )
    return torch.matmul(a, b)


def _check_broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(
            f"{op} shapes do not broadcast: {_shape(a)} and {_shape(b)}"
        ) from exc


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum."""
    _check_broadcast(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise product."""
    _check_broadcast(a, b, "mul")
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Normalize the last axis to zero mean and unit (biased) variance.

    No learned affine: scale and shift come from AdaLN modulation.
    """
    return F.layer_norm(x, (x.shape[-1],), eps=eps)


def linear(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """``x @ weight.T + bias`` with the weight in ``(out, in)`` layout."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} does not match weight {_shape(weight)}"
        )
    return F.linear(x, weight, bias)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax with the row maximum subtracted before exponentiation."""
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return torch.softmax(shifted, dim=dim)


def mean(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def concat(tensors: Sequence[torch.Tensor], dim: int = -2) -> torch.Tensor:
    """Concatenate along the sequence axis; every other axis must agree."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0]
    axis = dim % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[d] != ref.shape[d] for d in range(ref.dim()) if d != axis
        ):
            raise DimensionError(
                f"concat shapes disagree off axis {dim}: {_shape(ref)} and {_shape(t)}"
            )
    return torch.cat(list(tensors), dim=dim)


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Scaled dot-product attention restricted to ``mask``.

    ``q``, ``k``, ``v`` are ``(..., L, d)``; ``mask`` is an ``L x L``
    boolean matrix where ``mask[q, k]`` permits query ``q`` to read key
    ``k``. Disallowed scores are replaced by ``-inf`` before the softmax,
    so their weights are exactly zero and the corresponding value rows
    cannot leak into the output.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(
            f"attention operands differ: q{_shape(q)} k{_shape(k)} v{_shape(v)}"
        )
    length = q.shape[-2]
    if mask.dtype != torch.bool or _shape(mask) != (length, length):
        raise MaskError(
            f"mask must be a {length}x{length} boolean matrix, got "
            f"{mask.dtype} {_shape(mask)}"
        )
    empty_rows = (~mask.any(dim=-1)).nonzero().flatten().tolist()
    if empty_rows:
        raise MaskError(f"query rows {empty_rows} have no permitted keys")

    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    return matmul(softmax(scores, dim=-1), v)


@dataclass
class GradCheckFailure:
    """One coordinate whose analytic and numeric gradients disagree."""

    param_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    max_rel_error: float = 0.0
    coordinates_checked: int = 0
    tolerance: float = 1e-4
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "coordinates_checked": self.coordinates_checked,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failures": [vars(f) for f in self.failures],
        }


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
    return abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check ``d f / d params`` against central finite differences.

    ``f`` must be a deterministic zero-argument closure returning a scalar
    that reads ``params``. Coordinates are perturbed in place and restored
    bit-for-bit. ``max_coords`` limits the check to a seeded random subset
    of coordinates per tensor; ``None`` checks every coordinate.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")

    loss = f()
    if loss.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar, got shape {_shape(loss)}")
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()} in grad_check")

    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    report = GradCheckReport(tolerance=tol)
    picker = torch.Generator().manual_seed(seed)

    for p_idx, (param, grad) in enumerate(zip(params, grads)):
        analytic = (
            torch.zeros_like(param) if grad is None else grad.detach()
        ).reshape(-1)
        flat = param.data.view(-1)
        coords = range(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            coords = torch.randperm(flat.numel(), generator=picker)[
                :max_coords
            ].tolist()

        for idx in coords:
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
                plus = f().item()
                flat[idx] = original - h
                minus = f().item()
                flat[idx] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericError(
                    f"non-finite loss while perturbing parameter {p_idx}[{idx}]"
                )
            numeric = (plus - minus) / (2 * h)
            a = analytic[idx].item()
            err = relative_error(a, numeric)
            report.coordinates_checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tol:
                report.failures.append(GradCheckFailure(p_idx, idx, a, numeric, err))

    if report.failures:
        logging.warning(
            "grad_check: %d of %d coordinates exceed tol=%g (max rel err %.3g)",
            len(report.failures),
            report.coordinates_checked,
            tol,
            report.max_rel_error,
        )
    return report
