"""HiFlow: coarse-to-fine flow-matching action policies.

A policy generates an action chunk scale by scale. A block-causal
transformer (``ScaleAR``) conditions each scale on the coarser samples
already drawn, and a small flow network (``ActionFlowNet``) integrates
Gaussian noise into that scale's actions.

Image output from ``trace_to_plot`` needs the ``plot`` extra.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import Observation
from .config import RunConfig, TrainConfig, load_run_config
from .core import HiFlowPolicy, build_policy
from .dataset import Dataset, Episode, load_dataset, save_dataset
from .errors import HiFlowError
from .evaluation import evaluate, policy_agents, scale_ablation
from .multiscale import ScaleSchedule
from .normalization import Normalizer, fit_normalizer
from .sampler import SampleTrace, sample_chunk, trace_to_plot
from .tasks import generate
from .training import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "Observation",
    "RunConfig",
    "TrainConfig",
    "load_run_config",
    "HiFlowPolicy",
    "build_policy",
    "Dataset",
    "Episode",
    "load_dataset",
    "save_dataset",
    "HiFlowError",
    "evaluate",
    "policy_agents",
    "scale_ablation",
    "ScaleSchedule",
    "Normalizer",
    "fit_normalizer",
    "SampleTrace",
    "sample_chunk",
    "trace_to_plot",
    "generate",
    "Trainer",
    "train",
]

