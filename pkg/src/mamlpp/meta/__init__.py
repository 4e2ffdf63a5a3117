"""Inner/outer loop machinery, schedules and the meta-optimizer."""

from .adam import AdamState, adam_step
from .engine import (
    LSLR_PREFIX,
    AdaptationTrajectory,
    MetaConfig,
    MetaLearner,
    MetaState,
    inner_step,
)
from .schedules import anneal_loss_weights, cosine_lr, derivative_order

__all__ = [
    "LSLR_PREFIX", "AdamState", "AdaptationTrajectory", "MetaConfig", "MetaLearner",
    "MetaState", "adam_step", "anneal_loss_weights", "cosine_lr", "derivative_order",
    "inner_step",
]
