"""Demonstration episodes and the ``.hfds`` dataset file.

Layout (little-endian)::

    b"HFDS" | u32 version | u32 T | u32 A | u32 num_tasks |
    u32 feature width | u32 proprio width | u32 episode count |
    episode records, each a u32 byte length followed by:
        u32 task id | i64 mode | u32 chunk count | metadata JSON |
        features array | proprio array | chunks array

Arrays are float32 with an ``ndim`` + shape header (see ``codec``).
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from .codec import BinaryReader, BinaryWriter
from .conditioning import Observation
from .errors import ArtifactNotFoundError, CorruptionError, SchemaError

MAGIC = b"HFDS"
FORMAT_VERSION = 1
NO_MODE = -1


@dataclass
class Episode:
    """One expert demonstration, chunked.

    Row ``k`` of ``features``/``proprio`` is the observation the expert saw
    before executing ``chunks[k]``.
    """

    task_id: int
    features: np.ndarray
    proprio: np.ndarray
    chunks: np.ndarray
    mode: int = NO_MODE
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        self.chunks = np.asarray(self.chunks, dtype=np.float32)
        if self.chunks.ndim != 3:
            raise SchemaError(f"chunks must be (n, T, A), got shape {self.chunks.shape}")
        n = self.chunks.shape[0]
        if self.features.shape[0] != n or self.proprio.shape[0] != n:
            raise SchemaError(
                f"{self.features.shape[0]} observations for {n} chunks "
                f"(proprio rows {self.proprio.shape[0]})"
            )

    def __len__(self) -> int:
        return int(self.chunks.shape[0])

    def observations(self) -> List[Observation]:
        return [
            Observation(self.features[k], self.proprio[k], self.task_id) for k in range(len(self))
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.mode == other.mode
            and self.metadata == other.metadata
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.proprio, other.proprio)
            and np.array_equal(self.chunks, other.chunks)
        )


@dataclass(frozen=True)
class DatasetInfo:
    chunk_length: int
    action_dim: int
    num_tasks: int
    feature_dim: int
    proprio_dim: int

    def check(self, episode: Episode) -> None:
        expected = (self.chunk_length, self.action_dim)
        if episode.chunks.shape[1:] != expected:
            raise SchemaError(f"episode chunks {episode.chunks.shape[1:]} do not match {expected}")
        if episode.features.shape[1:] != (self.feature_dim,):
            raise SchemaError(f"episode features {episode.features.shape[1:]} != ({self.feature_dim},)")
        if episode.proprio.shape[1:] != (self.proprio_dim,):
            raise SchemaError(f"episode proprio {episode.proprio.shape[1:]} != ({self.proprio_dim},)")
        if not 0 <= episode.task_id < self.num_tasks:
            raise SchemaError(f"episode task id {episode.task_id} outside [0, {self.num_tasks})")

    def to_dict(self) -> dict:
        return {
            "chunk_length": self.chunk_length,
            "action_dim": self.action_dim,
            "num_tasks": self.num_tasks,
            "feature_dim": self.feature_dim,
            "proprio_dim": self.proprio_dim,
        }


@dataclass
class Dataset(Sequence[Episode]):
    """Episodes plus the widths every one of them shares."""

    info: DatasetInfo
    episodes: List[Episode]

    def __len__(self) -> int:
        return len(self.episodes)

    def __getitem__(self, idx):  # type: ignore[override]
        return self.episodes[idx]

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    @classmethod
    def from_episodes(
        cls, episodes: Sequence[Episode], info: Optional[DatasetInfo] = None
    ) -> "Dataset":
        episodes = list(episodes)
        if info is None:
            if not episodes:
                raise SchemaError("cannot infer dataset widths from zero episodes")
            first = episodes[0]
            info = DatasetInfo(
                chunk_length=first.chunks.shape[1],
                action_dim=first.chunks.shape[2],
                num_tasks=max(e.task_id for e in episodes) + 1,
                feature_dim=first.features.shape[1],
                proprio_dim=first.proprio.shape[1],
            )
        for episode in episodes:
            info.check(episode)
        return cls(info, episodes)

    def num_chunks(self) -> int:
        return sum(len(e) for e in self.episodes)


@dataclass
class TrainingArrays:
    """Every (observation, chunk) pair of a dataset, stacked row-wise."""

    features: np.ndarray
    proprio: np.ndarray
    task_ids: np.ndarray
    chunks: np.ndarray

    def __len__(self) -> int:
        return int(self.chunks.shape[0])


def stack_episodes(dataset: Dataset) -> TrainingArrays:
    if dataset.num_chunks() == 0:
        raise SchemaError("dataset holds no chunks")
    return TrainingArrays(
        features=np.concatenate([e.features for e in dataset]),
        proprio=np.concatenate([e.proprio for e in dataset]),
        task_ids=np.concatenate([np.full(len(e), e.task_id, dtype=np.int64) for e in dataset]),
        chunks=np.concatenate([e.chunks for e in dataset]),
    )


def _encode_episode(episode: Episode) -> bytes:
    buf = io.BytesIO()
    writer = BinaryWriter(buf)
    writer.u32(episode.task_id)
    writer.i64(episode.mode)
    writer.u32(len(episode))
    writer.json(episode.metadata)
    writer.array(episode.features)
    writer.array(episode.proprio)
    writer.array(episode.chunks)
    return buf.getvalue()


def _decode_episode(payload: bytes, source: str) -> Episode:
    reader = BinaryReader(io.BytesIO(payload), source=source)
    task_id = reader.u32()
    mode = reader.i64()
    n_chunks = reader.u32()
    metadata = reader.json()
    features = reader.array()
    proprio = reader.array()
    chunks = reader.array()
    if not reader.at_end():
        raise CorruptionError(f"{source}: episode record longer than its fields")
    if len(chunks) != n_chunks:
        raise CorruptionError(f"{source}: record says {n_chunks} chunks, payload holds {len(chunks)}")
    return Episode(task_id, features, proprio, chunks, mode=mode, metadata=metadata)


def save_dataset(
    episodes: Union[Dataset, Sequence[Episode]],
    path: Union[str, Path],
    info: Optional[DatasetInfo] = None,
) -> Path:
    """Write episodes to ``path``; ``info`` is required for an empty list."""
    dataset = episodes if isinstance(episodes, Dataset) else Dataset.from_episodes(episodes, info)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = dataset.info
    with open(path, "wb") as f:
        writer = BinaryWriter(f)
        writer.magic(MAGIC)
        writer.u32(FORMAT_VERSION)
        for value in (
            info.chunk_length,
            info.action_dim,
            info.num_tasks,
            info.feature_dim,
            info.proprio_dim,
            len(dataset),
        ):
            writer.u32(value)
        for episode in dataset:
            writer.blob(_encode_episode(episode))
    logging.info("Wrote %d episodes (%d chunks) to %s", len(dataset), dataset.num_chunks(), path)
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset written by ``save_dataset``."""
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(f"dataset not found: {path}")
    with open(path, "rb") as f:
        reader = BinaryReader(f, source=str(path))
        reader.magic(MAGIC)
        reader.version(FORMAT_VERSION)
        info = DatasetInfo(
            chunk_length=reader.u32(),
            action_dim=reader.u32(),
            num_tasks=reader.u32(),
            feature_dim=reader.u32(),
            proprio_dim=reader.u32(),
        )
        count = reader.u32()
        episodes = [_decode_episode(reader.blob(), f"{path}[{k}]") for k in range(count)]
        if not reader.at_end():
            raise CorruptionError(f"{path}: trailing bytes after {count} episodes")
    return Dataset.from_episodes(episodes, info)
