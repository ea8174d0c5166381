"""Run and training configuration.

``TrainConfig()`` is the full-size profile (hidden width 1024, 12 ScaleAR
blocks, 6 flow blocks); ``TrainConfig.desk()`` shrinks the networks so a
CPU can train them in hours. Files are YAML or JSON and are merged the
same way everywhere: file values first, explicit overrides on top.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import torch
import yaml

from .errors import ArtifactNotFoundError, ConfigError
from .multiscale import ScaleSchedule

PROFILES = ("full", "desk")
TASKS = ("reach", "waypoints")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    """Every model and optimisation hyperparameter."""

    hidden_dim: int = 1024
    chunk_length: int = 8
    scales: Tuple[int, ...] = (1, 2, 4, 8)
    scalear_depth: int = 12
    flow_depth: int = 6
    head_dim: int = 64
    mlp_ratio: float = 4.0
    time_embed_dim: int = 128
    action_dim: int = 2
    feature_dim: int = 4
    proprio_dim: int = 2
    num_tasks: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-4
    min_learning_rate: float = 1e-6
    lr_schedule: str = "cosine"
    warmup_steps: int = 500
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    ema_rate: float = 0.9999
    n_steps: int = 25
    total_steps: int = 20000
    seed: int = 0
    strict_mask: bool = False
    flow_pos_embed: bool = True
    dtype: str = "float32"
    log_every: int = 50
    quantile_low: float = 0.01
    quantile_high: float = 0.99

    def __post_init__(self) -> None:
        self.scales = tuple(int(s) for s in self.scales)
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        self.validate()

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        """CPU-sized profile; same mechanisms, smaller networks."""
        values: Dict[str, Any] = {
            "hidden_dim": 128,
            "scalear_depth": 4,
            "flow_depth": 3,
            "batch_size": 64,
        }
        values.update(overrides)
        return cls(**values)

    @classmethod
    def profile(cls, name: str, **overrides: Any) -> "TrainConfig":
        if name == "full":
            return cls(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ConfigError(f"unknown profile {name!r}; valid profiles: {', '.join(PROFILES)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """``base`` (default: full profile) with ``data`` applied on top."""
        _reject_unknown(data, cls, "train")
        values = asdict(base) if base is not None else {}
        values.update(data)
        return cls(**values)

    def validate(self) -> None:
        positive = (
            "hidden_dim", "chunk_length", "head_dim", "time_embed_dim", "action_dim",
            "feature_dim", "proprio_dim", "num_tasks", "batch_size", "n_steps",
            "total_steps", "log_every",
        )
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("scalear_depth", "flow_depth", "warmup_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ConfigError(f"ema_rate must lie in [0, 1), got {self.ema_rate}")
        if not 0.0 <= self.quantile_low < self.quantile_high <= 1.0:
            raise ConfigError(
                f"quantiles must satisfy 0 <= low < high <= 1, "
                f"got ({self.quantile_low}, {self.quantile_high})"
            )
        if self.learning_rate < 0 or self.min_learning_rate < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        # raises ScheduleError with the specific rule broken
        self.schedule()

    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.scales, self.chunk_length)

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["scales"] = list(self.scales)
        data["betas"] = list(self.betas)
        return data

    def config_hash(self) -> str:
        """Stable identifier of the hyperparameters."""
        config_str = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(config_str.encode()).hexdigest()[:16]

    def with_schedule(self, scales: Tuple[int, ...]) -> "TrainConfig":
        """Same config with a different scale set; ``T`` follows the finest scale."""
        return replace(self, scales=tuple(scales), chunk_length=max(scales))


@dataclass
class RunConfig:
    """Run-level settings wrapped around a ``TrainConfig``."""

    profile: str = "desk"
    seed: int = 0
    task: str = "reach"
    out_dir: str = "runs/default"
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    episodes: int = 200
    num_tasks: int = 4
    use_ema: bool = True
    rollouts: int = 100
    max_chunks: int = 16
    threads: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; valid profiles: {', '.join(PROFILES)}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        for name in ("episodes", "rollouts", "max_chunks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.task == "waypoints" and self.num_tasks < 2:
            raise ConfigError(f"waypoints task needs num_tasks >= 2, got {self.num_tasks}")

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        data["train"] = self.train.to_dict()
        return data

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the resolved configuration as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path


def _reject_unknown(data: Mapping[str, Any], cls: type, section: str) -> None:
    valid = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(
            f"unknown {section} key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(valid))}"
        )


def _read_file(config_file: Union[str, Path]) -> Dict[str, Any]:
    path = Path(config_file)
    if not path.exists():
        raise ArtifactNotFoundError(f"config file not found: {path}")
    with open(path, "r") as f:
        try:
            if path.suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f) or {}
            elif path.suffix == ".json":
                data = json.load(f)
            else:
                raise ConfigError(f"unsupported config format {path.suffix!r} (use .yaml, .yml or .json)")
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return data


def build_run_config(data: Mapping[str, Any]) -> RunConfig:
    """Validate a raw mapping into a ``RunConfig``."""
    data = dict(data)
    train_data = data.pop("train", None) or {}
    if not isinstance(train_data, Mapping):
        raise ConfigError("'train' must be a mapping")
    _reject_unknown(data, RunConfig, "run")
    profile = data.get("profile", "desk")
    base = TrainConfig.profile(profile)
    if "seed" in data and "seed" not in train_data:
        train_data = {**train_data, "seed": data["seed"]}
    if data.get("task") == "waypoints" and "num_tasks" not in train_data:
        train_data = {**train_data, "num_tasks": data.get("num_tasks", RunConfig.num_tasks)}
    try:
        train = TrainConfig.from_dict(train_data, base=base)
        return RunConfig(**data, train=train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Load a run configuration from an optional YAML/JSON file

    Args:
        config_file: Path to configuration file (YAML or JSON)
        overrides: Keys that take precedence over the file; a nested
            ``train`` mapping is merged key by key

    Returns:
        Validated RunConfig
    """
    config: Dict[str, Any] = _read_file(config_file) if config_file else {}

    if overrides:
        for key, value in overrides.items():
            if key == "train" and isinstance(value, Mapping):
                merged = dict(config.get("train") or {})
                merged.update(value)
                config["train"] = merged
            else:
                config[key] = value

    return build_run_config(config)
