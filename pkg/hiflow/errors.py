"""Exception hierarchy shared by every HiFlow component.

Each class carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for data problems, 4 for numeric
failures.
"""

from typing import Any, Optional


class HiFlowError(Exception):
    """Base class for all HiFlow failures."""

    exit_code = 1


class ConfigError(HiFlowError):
    """Invalid configuration value, key, or combination."""

    exit_code = 2


class ScheduleError(ConfigError):
    """Scale schedule violates its validity rules."""


class LayoutError(ConfigError):
    """Token spans do not match the scale layout."""


class MaskError(ConfigError):
    """Attention mask is malformed or leaves a query without keys."""


class DataError(HiFlowError):
    """Input data is missing, malformed, or inconsistent."""

    exit_code = 3


class SchemaError(DataError):
    """File or dataset schema does not match what the reader expects."""


class CorruptionError(DataError):
    """File is truncated or internally inconsistent."""


class TaskLookupError(DataError, LookupError):
    """Task identifier outside the configured range."""


class ArtifactNotFoundError(DataError, FileNotFoundError):
    """A dataset or checkpoint path does not exist."""


class TraceError(DataError):
    """A sample trace is incomplete."""


class RolloutError(HiFlowError):
    """Environment state diverged during a rollout."""


class NumericError(HiFlowError):
    """Non-finite value or arithmetic contract violation.

    Optional ``scale``, ``block`` and ``step`` context is appended to the
    message so a failure can be located without a debugger.
    """

    exit_code = 4

    def __init__(
        self,
        message: str,
        *,
        scale: Optional[int] = None,
        block: Optional[int] = None,
        step: Optional[int] = None,
    ):
        self.scale = scale
        self.block = block
        self.step = step
        context = {"scale": scale, "block": block, "step": step}
        details = ", ".join(f"{k}={v}" for k, v in context.items() if v is not None)
        super().__init__(f"{message} ({details})" if details else message)

    def context(self) -> dict:
        """Return the non-empty location fields."""
        fields: dict[str, Any] = {
            "scale": self.scale,
            "block": self.block,
            "step": self.step,
        }
        return {k: v for k, v in fields.items() if v is not None}


class DimensionError(NumericError, ValueError):
    """Operand shapes are incompatible."""


class ResampleError(NumericError, ValueError):
    """Requested resampling length is invalid."""


class RangeError(NumericError, ValueError):
    """Scalar argument outside its admissible interval."""


class ConditioningError(NumericError, ValueError):
    """Conditioning rows do not line up with the generated rows."""
