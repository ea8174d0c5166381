"""Tests for episodes, the .hfds file and row stacking."""

import struct
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from hiflow.dataset import (
    FORMAT_VERSION,
    Dataset,
    DatasetInfo,
    Episode,
    load_dataset,
    save_dataset,
    stack_episodes,
)
from hiflow.errors import ArtifactNotFoundError, CorruptionError, SchemaError


def _episode(task_id: int = 0, n: int = 2, length: int = 4) -> Episode:
    return Episode(
        task_id=task_id,
        features=np.full((n, 4), 0.25 * (task_id + 1)),
        proprio=np.full((n, 2), 0.5),
        chunks=np.arange(n * length * 2, dtype=np.float64).reshape(n, length, 2) / 100,
        mode=1,
        metadata={"index": task_id},
    )


@pytest.fixture()
def saved(reach_data: Dataset, tmp_path: Any) -> Path:
    return save_dataset(reach_data, tmp_path / "data" / "reach.hfds")


class TestFile:
    def test_round_trip(self, reach_data: Dataset, saved: Path) -> None:
        loaded = load_dataset(saved)
        assert loaded.info == reach_data.info
        assert list(loaded) == list(reach_data)

    def test_missing(self, tmp_path: Any) -> None:
        with pytest.raises(ArtifactNotFoundError):
            load_dataset(tmp_path / "absent.hfds")

    def test_bad_magic(self, saved: Path) -> None:
        saved.write_bytes(b"HFCK" + saved.read_bytes()[4:])
        with pytest.raises(SchemaError):
            load_dataset(saved)

    def test_future_version(self, saved: Path) -> None:
        data = saved.read_bytes()
        saved.write_bytes(data[:4] + struct.pack("<I", FORMAT_VERSION + 1) + data[8:])
        with pytest.raises(SchemaError):
            load_dataset(saved)

    def test_truncated(self, saved: Path) -> None:
        data = saved.read_bytes()
        saved.write_bytes(data[: len(data) - 5])
        with pytest.raises(CorruptionError):
            load_dataset(saved)

    def test_trailing_bytes(self, saved: Path) -> None:
        saved.write_bytes(saved.read_bytes() + b"junk")
        with pytest.raises(CorruptionError):
            load_dataset(saved)

    def test_empty_needs_info(self, tmp_path: Any) -> None:
        with pytest.raises(SchemaError):
            save_dataset([], tmp_path / "empty.hfds")
        info = DatasetInfo(4, 2, 1, 4, 2)
        path = save_dataset([], tmp_path / "empty.hfds", info=info)
        loaded = load_dataset(path)
        assert len(loaded) == 0
        assert loaded.info == info


class TestEpisode:
    def test_row_counts_must_agree(self) -> None:
        with pytest.raises(SchemaError):
            Episode(0, np.zeros((3, 4)), np.zeros((2, 2)), np.zeros((2, 4, 2)))

    def test_chunks_must_be_3d(self) -> None:
        with pytest.raises(SchemaError):
            Episode(0, np.zeros((2, 4)), np.zeros((2, 2)), np.zeros((2, 8)))

    def test_observations(self) -> None:
        obs = _episode(task_id=1).observations()
        assert len(obs) == 2
        assert obs[0].task_id == 1
        assert obs[0].features.dtype == np.float32


class TestDataset:
    def test_info_inferred(self) -> None:
        data = Dataset.from_episodes([_episode(0), _episode(2)])
        assert data.info == DatasetInfo(4, 2, 3, 4, 2)
        assert data.num_chunks() == 4

    def test_mismatched_widths_rejected(self) -> None:
        with pytest.raises(SchemaError):
            Dataset.from_episodes([_episode(0, length=4), _episode(1, length=8)])

    def test_task_outside_info(self) -> None:
        with pytest.raises(SchemaError):
            Dataset.from_episodes([_episode(3)], DatasetInfo(4, 2, 2, 4, 2))

    def test_stack_episodes(self) -> None:
        data = Dataset.from_episodes([_episode(0, n=2), _episode(1, n=3)])
        rows = stack_episodes(data)
        assert len(rows) == 5
        assert rows.task_ids.tolist() == [0, 0, 1, 1, 1]
        assert rows.chunks.shape == (5, 4, 2)
        np.testing.assert_array_equal(rows.features[2:], data[1].features)

    def test_stack_rejects_empty(self) -> None:
        with pytest.raises(SchemaError):
            stack_episodes(Dataset(DatasetInfo(4, 2, 1, 4, 2), []))
