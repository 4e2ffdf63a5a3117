"""Few-shot task pipeline: class pools, splits, augmentation and episodes."""

from .episodes import N_EVAL_TASKS, Episode, EpisodeStream, fixed_eval_set, sample_episode
from .omniglot import load_omniglot
from .pool import (
    OMNIGLOT_CLASSES,
    OMNIGLOT_SPLIT,
    SECTIONS,
    ClassPool,
    SplitAssignment,
    augment_rotations,
    split_classes,
)
from .synthetic import synth_glyph_pool

__all__ = [
    "N_EVAL_TASKS", "OMNIGLOT_CLASSES", "OMNIGLOT_SPLIT", "SECTIONS", "ClassPool",
    "Episode", "EpisodeStream", "SplitAssignment", "augment_rotations",
    "fixed_eval_set", "load_omniglot", "sample_episode", "split_classes",
    "synth_glyph_pool",
]
