"""Versioned checkpoint container (``.hfck``).

Layout (all integers little-endian u32)::

    b"HFCK" | version | header JSON (length-prefixed) | tensor count |
    tensor records: name (length-prefixed UTF-8), ndim, shape..., float32 data

The header carries the config, its hash, the step, normalizer bounds,
optimizer hyperparameters and step counters, scheduler state and the
ordered tensor directory. Tensor names are grouped by prefix:
``params/``, ``ema/`` and ``optim/<index>/<slot>``. See docs/FORMATS.md.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch

from .codec import BinaryReader, BinaryWriter
from .config import TrainConfig
from .errors import ArtifactNotFoundError, CorruptionError, SchemaError
from .normalization import Normalizer

MAGIC = b"HFCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to sample from, or resume, a training run."""

    config: TrainConfig
    step: int
    normalizer: Normalizer
    params: Dict[str, torch.Tensor]
    ema: Dict[str, torch.Tensor]
    optimizer: Optional[Dict[str, Any]] = None
    scheduler: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def _optimizer_header(state: Dict[str, Any]) -> Dict[str, Any]:
    groups = []
    for group in state["param_groups"]:
        g = dict(group)
        g["betas"] = list(g["betas"])
        groups.append(g)
    steps = {
        str(idx): float(slot["step"]) for idx, slot in state["state"].items() if "step" in slot
    }
    return {"param_groups": groups, "steps": steps}


def _optimizer_tensors(state: Dict[str, Any]) -> Dict[str, torch.Tensor]:
    out = {}
    for idx, slot in state["state"].items():
        for key, value in slot.items():
            if key != "step":
                out[f"optim/{idx}/{key}"] = value
    return out


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write ``ckpt`` to ``path``; parent directories are created.

    The container stores float32 only. Tensors of any other dtype raise
    ``SchemaError`` before anything is written, so runs meant to be saved
    train in float32.
    """
    path = Path(path)

    tensors: Dict[str, torch.Tensor] = {}
    tensors.update({f"params/{k}": v for k, v in ckpt.params.items()})
    tensors.update({f"ema/{k}": v for k, v in ckpt.ema.items()})
    if ckpt.optimizer is not None:
        tensors.update(_optimizer_tensors(ckpt.optimizer))
    wrong = sorted(name for name, value in tensors.items() if value.dtype != torch.float32)
    if wrong:
        raise SchemaError(
            f"checkpoint tensors must be float32, got {tensors[wrong[0]].dtype} for "
            f"{len(wrong)} tensor(s) starting with {wrong[0]}"
        )
    path.parent.mkdir(parents=True, exist_ok=True)

    header = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config_hash,
        "step": int(ckpt.step),
        "normalizer": ckpt.normalizer.to_dict(),
        "optimizer": _optimizer_header(ckpt.optimizer) if ckpt.optimizer is not None else None,
        "scheduler": ckpt.scheduler,
        "metadata": ckpt.metadata,
        "tensors": list(tensors),
    }

    with open(path, "wb") as f:
        writer = BinaryWriter(f)
        writer.magic(MAGIC)
        writer.u32(FORMAT_VERSION)
        writer.json(header)
        writer.u32(len(tensors))
        for name, value in tensors.items():
            writer.text(name)
            writer.array(value.detach().cpu().numpy())

    logging.info("Saved checkpoint at step %d to %s (%d tensors)", ckpt.step, path, len(tensors))
    return path


def _restore_optimizer(
    header: Optional[Dict[str, Any]], tensors: Dict[str, torch.Tensor]
) -> Optional[Dict[str, Any]]:
    if header is None:
        return None
    groups = []
    for group in header["param_groups"]:
        g = dict(group)
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for idx, step in header["steps"].items():
        state[int(idx)] = {"step": torch.tensor(step, dtype=torch.float32)}
    for name, value in tensors.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    return {"state": state, "param_groups": groups}


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(f"checkpoint not found: {path}")

    with open(path, "rb") as f:
        reader = BinaryReader(f, source=str(path))
        reader.magic(MAGIC)
        reader.version(FORMAT_VERSION)
        header = reader.json()
        count = reader.u32()
        directory: List[str] = header.get("tensors", [])
        if count != len(directory):
            raise CorruptionError(f"{path}: directory lists {len(directory)} tensors, file {count}")
        tensors: Dict[str, torch.Tensor] = {}
        for expected in directory:
            name = reader.text()
            if name != expected:
                raise CorruptionError(f"{path}: tensor {name!r} out of order (expected {expected!r})")
            tensors[name] = torch.from_numpy(reader.array())
        if not reader.at_end():
            raise CorruptionError(f"{path}: trailing bytes after tensor records")

    try:
        config = TrainConfig.from_dict(header["config"])
    except KeyError as exc:
        raise SchemaError(f"{path}: header missing {exc}") from exc
    if config.config_hash() != header.get("config_hash"):
        raise CorruptionError(f"{path}: config hash does not match stored config")

    def group(prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    return Checkpoint(
        config=config,
        step=int(header["step"]),
        normalizer=Normalizer.from_dict(header["normalizer"]),
        params=group("params/"),
        ema=group("ema/"),
        optimizer=_restore_optimizer(header.get("optimizer"), group("optim/")),
        scheduler=header.get("scheduler"),
        metadata=header.get("metadata") or {},
    )
