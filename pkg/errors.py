"""
Exception hierarchy for mcqa-lens
Every failure the library raises on purpose derives from MCQALensError
"""

from typing import Optional


class MCQALensError(Exception):
    """Base class for all library errors"""


class DimensionError(MCQALensError, ValueError):
    """Shapes or widths do not line up"""


class NumericError(MCQALensError, ValueError):
    """A tensor holds NaN or Inf where finite values are required"""


class ConfigurationError(MCQALensError, ValueError):
    """Invalid configuration or inconsistent call arguments"""


class DatasetError(MCQALensError, ValueError):
    """A dataset record failed validation"""

    def __init__(self, message: str, line_number: Optional[int] = None, field: Optional[str] = None):
        self.line_number = line_number
        self.field = field
        location = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{location}{message}")


class InterventionError(MCQALensError, ValueError):
    """A capture or patch names a site the forward pass never reaches"""


class ProtocolError(MCQALensError, ValueError):
    """An activation-patching precondition does not hold"""

    def __init__(self, message: str, condition: str):
        self.condition = condition
        super().__init__(f"{condition}: {message}")


class EmptyCohortError(MCQALensError, ValueError):
    """No instance qualified for an aggregate"""


class CheckpointError(MCQALensError, OSError):
    """Checkpoint file is corrupt, truncated or inconsistent with its header"""

    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        prefix = f"tensor '{tensor}': " if tensor else ""
        super().__init__(f"{prefix}{message}")


class TrainingError(MCQALensError, RuntimeError):
    """Training diverged"""

    def __init__(self, message: str, last_good_step: int):
        self.last_good_step = last_good_step
        super().__init__(f"{message} (last good step: {last_good_step})")
