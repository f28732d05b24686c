"""Training stages, evaluation metrics, checkpointing and ablations."""

from alignlab.trainer.config import LoRAConfig, RunConfig

__all__ = ["LoRAConfig", "RunConfig"]
