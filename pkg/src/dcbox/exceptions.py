"""
Error hierarchy for dcbox
"""

from typing import Optional


class DcboxError(Exception):
    """Base class for every error raised by dcbox"""


class ShapeError(DcboxError, ValueError):
    """Array shapes do not line up"""


class NonFiniteError(DcboxError, ArithmeticError):
    """A NaN or infinite value showed up where a finite one is required"""


class GradientCheckError(DcboxError, RuntimeError):
    """A gradient check could not be evaluated"""


class LayerStateError(DcboxError, RuntimeError):
    """A layer was used out of order, such as backward before forward"""


class ScheduleError(DcboxError, ValueError):
    """Invalid loss weighting or schedule request"""


class LossInputError(DcboxError, ValueError):
    """Inputs violate a loss function's preconditions"""


class DegenerateClusterError(DcboxError, ValueError):
    """A cluster lost all of its (soft) mass"""

    def __init__(self, cluster_id: int, message: Optional[str] = None):
        self.cluster_id = cluster_id
        super().__init__(message or f"Cluster {cluster_id} has zero soft assignment mass")


class ClusteringError(DcboxError, ValueError):
    """Invalid input to a classical clustering routine"""


class ConfigError(DcboxError, ValueError):
    """Base class for configuration problems"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{location}")


class UnknownConfigKeyError(ConfigError):
    """Config file names a key that does not exist"""


class InvalidConfigValueError(ConfigError):
    """Config value has the wrong type or is out of range"""


class MissingConfigKeyError(ConfigError):
    """A required config key is absent"""


class IncompatibleConfigError(InvalidConfigValueError):
    """Individually valid options that cannot be combined"""


class DataFormatError(DcboxError, ValueError):
    """Base class for malformed input files"""


class BadMagicError(DataFormatError):
    """IDX file starts with an unexpected magic number"""


class TruncatedPayloadError(DataFormatError):
    """IDX payload is shorter than its header promises"""


class CountMismatchError(DataFormatError):
    """Image and label files disagree on the number of items"""


class CsvFormatError(DataFormatError):
    """CSV row is ragged or holds a non-numeric cell"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(message)


class CheckpointError(DcboxError, ValueError):
    """Checkpoint file cannot be decoded or does not match the network"""


class TrainingDivergedError(DcboxError, RuntimeError):
    """Loss became non-finite during training"""

    def __init__(self, phase: str, step: int, detail: str = ""):
        self.phase = phase
        self.step = step
        suffix = f": {detail}" if detail else ""
        super().__init__(f"Training diverged in phase '{phase}' at step {step}{suffix}")


class PhaseError(DcboxError, RuntimeError):
    """A pipeline phase failed; wraps the original error"""

    def __init__(self, phase: str, cause: Exception):
        self.phase = phase
        self.cause = cause
        super().__init__(f"{phase}: {cause}")
