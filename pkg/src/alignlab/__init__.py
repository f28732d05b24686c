"""Bridge a multimodal encoder into a frozen MM-DiT generator by attention distillation."""

from alignlab.errors import (AlignLabError, CheckpointError, ConfigError, DimensionError, NumericError,
                             TrainingError, UsageError)

__version__ = "0.1.0"

__all__ = ["AlignLabError", "CheckpointError", "ConfigError", "DimensionError", "NumericError",
           "TrainingError", "UsageError", "__version__"]
