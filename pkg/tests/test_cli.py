"""Tests for the hiflow command line interface."""

import json
from pathlib import Path
from typing import Any, List

import pytest
import yaml
from click.testing import CliRunner, Result

from hiflow.cli import cli, parse_scales
from hiflow.errors import ScheduleError

TINY_RUN = {
    "episodes": 4,
    "rollouts": 2,
    "max_chunks": 2,
    "threads": 1,
    "use_ema": False,
    "train": {
        "hidden_dim": 16,
        "chunk_length": 4,
        "scales": [1, 2, 4],
        "scalear_depth": 1,
        "flow_depth": 1,
        "head_dim": 8,
        "time_embed_dim": 16,
        "batch_size": 2,
        "total_steps": 2,
        "warmup_steps": 1,
        "n_steps": 2,
        "ema_rate": 0.5,
        "log_every": 1,
    },
}


def invoke(args: List[str]) -> Result:
    return CliRunner().invoke(cli, args, catch_exceptions=False)


@pytest.fixture()
def tiny_config_file(tmp_path: Any) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


@pytest.fixture()
def trained(tiny_config_file: Path, tmp_path: Any) -> Path:
    out = tmp_path / "run"
    result = invoke(["train", "--config", str(tiny_config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_parse_scales() -> None:
    assert parse_scales("1, 2,8") == (1, 2, 8)
    with pytest.raises(ScheduleError):
        parse_scales("1,x")
    with pytest.raises(ScheduleError):
        parse_scales(",")


def test_gen_writes_dataset(tiny_config_file: Path, tmp_path: Any) -> None:
    out = tmp_path / "gen"
    result = invoke(
        ["gen", "--config", str(tiny_config_file), "--task", "waypoints", "--num-tasks", "2", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "Generated 4 episodes" in result.output
    assert (out / "dataset.hfds").exists()
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["task"] == "waypoints"
    assert resolved["train"]["num_tasks"] == 2


def test_train_outputs(trained: Path) -> None:
    assert (trained / "checkpoint.hfck").exists()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [1, 2]
    resolved = yaml.safe_load((trained / "resolved_config.yaml").read_text())
    assert resolved["train"]["hidden_dim"] == 16


def test_train_is_reproducible(tiny_config_file: Path, tmp_path: Any) -> None:
    for name in ("a", "b"):
        result = invoke(["train", "--config", str(tiny_config_file), "--out", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
        assert "Trained 2 steps" in result.output
    first = (tmp_path / "a" / "checkpoint.hfck").read_bytes()
    second = (tmp_path / "b" / "checkpoint.hfck").read_bytes()
    assert first == second


def test_train_from_dataset_and_resume(tiny_config_file: Path, tmp_path: Any) -> None:
    gen_out = tmp_path / "gen"
    assert invoke(["gen", "--config", str(tiny_config_file), "--out", str(gen_out)]).exit_code == 0
    dataset = str(gen_out / "dataset.hfds")
    first = tmp_path / "first"
    result = invoke(
        ["train", "--config", str(tiny_config_file), "--dataset", dataset, "--steps", "3", "--out", str(first)]
    )
    assert result.exit_code == 0, result.output
    resumed = tmp_path / "resumed"
    result = invoke(
        [
            "train", "--config", str(tiny_config_file), "--dataset", dataset, "--steps", "3",
            "--resume", str(first / "checkpoint.hfck"), "--out", str(resumed),
        ]
    )
    assert result.exit_code == 0, result.output
    assert "Trained 3 steps" in result.output


def test_sample_reports_passes(trained: Path, tiny_config_file: Path) -> None:
    result = invoke(
        ["sample", "--config", str(tiny_config_file), "--checkpoint", str(trained / "checkpoint.hfck"), "--out", str(trained)]
    )
    assert result.exit_code == 0, result.output
    assert "9 forward passes (expected 9)" in result.output
    trace = json.loads((trained / "trace.json").read_text())
    assert trace["scales"] == [1, 2, 4]
    assert len(trace["chunk"][0]) == 4


def test_eval_with_baselines(trained: Path, tiny_config_file: Path) -> None:
    result = invoke(
        [
            "eval", "--config", str(tiny_config_file),
            "--checkpoint", str(trained / "checkpoint.hfck"),
            "--baseline", "expert", "--baseline", "random",
            "--out", str(trained),
        ]
    )
    assert result.exit_code == 0, result.output
    reports = json.loads((trained / "eval.json").read_text())
    assert [r["name"] for r in reports] == ["checkpoint", "expert", "random"]
    assert all(r["n_rollouts"] == 2 for r in reports)


def test_plot_from_checkpoint_and_trace(trained: Path, tiny_config_file: Path) -> None:
    ckpt = str(trained / "checkpoint.hfck")
    result = invoke(["plot", "--config", str(tiny_config_file), "--checkpoint", ckpt, "--out", str(trained)])
    assert result.exit_code == 0, result.output
    description = json.loads((trained / "coarse_to_fine.json").read_text())
    assert [p["scale"] for p in description["panels"]] == [1, 2, 4]

    assert invoke(["sample", "--config", str(tiny_config_file), "--checkpoint", ckpt, "--out", str(trained)]).exit_code == 0
    result = invoke(
        [
            "plot", "--config", str(tiny_config_file), "--trace", str(trained / "trace.json"),
            "--checkpoint", ckpt, "-o", "from_trace.json", "--out", str(trained),
        ]
    )
    assert result.exit_code == 0, result.output
    assert (trained / "from_trace.json").exists()


def test_ablate(tiny_config_file: Path, tmp_path: Any) -> None:
    out = tmp_path / "ablate"
    result = invoke(
        [
            "ablate", "--config", str(tiny_config_file),
            "--scales", "1,2,4", "--scales", "1,4",
            "--seeds", "0", "--steps", "1", "--match-flow-evals",
            "--out", str(out),
        ]
    )
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "ablation.json").read_text())
    assert [row["scales"] for row in payload["rows"]] == [[1, 2, 4], [1, 4]]
    assert payload["rows"][1]["n_steps"] == 3


def test_validate_config(tiny_config_file: Path, tmp_path: Any) -> None:
    result = invoke(["validate-config", str(tiny_config_file)])
    assert result.exit_code == 0
    assert "Configuration is valid (profile desk" in result.output

    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  hidden_dimension: 8\n")
    assert invoke(["validate-config", str(bad)]).exit_code == 2

    schedule = tmp_path / "schedule.yaml"
    schedule.write_text("train:\n  scales: [1, 3, 8]\n")
    assert invoke(["validate-config", str(schedule)]).exit_code == 2


class TestExitCodes:
    def test_unknown_task_choice(self) -> None:
        result = CliRunner().invoke(cli, ["gen", "--task", "stack"])
        assert result.exit_code == 2

    def test_missing_dataset(self, tiny_config_file: Path, tmp_path: Any) -> None:
        result = invoke(
            ["train", "--config", str(tiny_config_file), "--dataset", str(tmp_path / "none.hfds"), "--out", str(tmp_path)]
        )
        assert result.exit_code == 3

    def test_bad_scales(self, tiny_config_file: Path, tmp_path: Any) -> None:
        result = invoke(["train", "--config", str(tiny_config_file), "--scales", "1,x", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_missing_checkpoint(self, tiny_config_file: Path, tmp_path: Any) -> None:
        result = invoke(
            ["sample", "--config", str(tiny_config_file), "--checkpoint", str(tmp_path / "none.hfck"), "--out", str(tmp_path)]
        )
        assert result.exit_code == 3

    def test_corrupt_checkpoint(self, trained: Path, tiny_config_file: Path) -> None:
        path = trained / "checkpoint.hfck"
        path.write_bytes(path.read_bytes()[:-4])
        result = invoke(["sample", "--config", str(tiny_config_file), "--checkpoint", str(path), "--out", str(trained)])
        assert result.exit_code == 3

    def test_version(self) -> None:
        result = invoke(["--version"])
        assert result.exit_code == 0
        assert "hiflow" in result.output
