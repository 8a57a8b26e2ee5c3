"""Variance-minimisation policy optimisation on toy diffusion chains."""
from .core import (
    DiffusionSchedule,
    ObjectiveSpec,
    RngStream,
    RolloutBatch,
    SizeLimitError,
    Trajectory,
    categorical_draw,
    make_linear_schedule,
)
from .smc import PotentialSpec, WeightSet
from .trainer import MetricsRow, TrainConfig, train

__all__ = [
    "DiffusionSchedule", "ObjectiveSpec", "RngStream", "RolloutBatch", "SizeLimitError", "Trajectory",
    "categorical_draw", "make_linear_schedule", "PotentialSpec", "WeightSet", "MetricsRow", "TrainConfig", "train",
]
