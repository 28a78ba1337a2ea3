"""Lipschitz-guided stochastic depth: schedules, bounds, a tiny ViT, attacks and FLOPs."""

__version__ = "0.1.0"

from .rng import Rng, seed_rng
from .schedule import DropSchedule, budget_check, custom_schedule, linear_schedule, no_drop_schedule
from .tensor import Tensor, backward

__all__ = [
    "DropSchedule", "Rng", "Tensor", "backward", "budget_check", "custom_schedule",
    "linear_schedule", "no_drop_schedule", "seed_rng",
]
