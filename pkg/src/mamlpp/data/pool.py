"""Class pools, class splits and rotation augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import StructuralError

SECTIONS = ("train", "val", "test")
OMNIGLOT_CLASSES = 1623
OMNIGLOT_SPLIT = (1150, 50, 423)


@dataclass(eq=False)
class ClassPool:
    """Labelled image classes.

    ``images`` holds the base classes as ``[base_class, instance, H, W]``
    floats in [0, 1].  ``classes`` lists ``(base_index, quarter_turns)`` for
    every class of the pool; rotated classes are produced on access, never
    stored.  Class ids are ``quarter_turns * n_base + base_index`` so base
    classes keep ids ``0..n_base-1``.
    """

    images: np.ndarray
    origin: str
    names: list = field(default_factory=list)
    classes: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise StructuralError(f"pool images must be [class, instance, H, W], got {self.images.shape}")
        if self.classes is None:
            self.classes = np.stack(
                [np.arange(self.n_base), np.zeros(self.n_base, dtype=np.int64)], axis=1
            )
        if not self.names:
            self.names = [f"{self.origin}/{i:05d}" for i in range(self.n_base)]

    @property
    def n_base(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def instances_per_class(self):
        return self.images.shape[1]

    @property
    def image_shape(self):
        return self.images.shape[2:]

    @cached_property
    def class_ids(self):
        return self.classes[:, 1] * self.n_base + self.classes[:, 0]

    def rotation_of(self, class_id):
        return int(class_id) // self.n_base * 90

    def base_of(self, class_id):
        return int(class_id) % self.n_base

    def image(self, class_id, instance):
        return np.rot90(self.images[self.base_of(class_id), instance], int(class_id) // self.n_base)

    def gather(self, class_id, instances):
        """Images of one class for an array of instance indices, as [n, H, W]."""
        block = self.images[self.base_of(class_id), np.asarray(instances)]
        k = int(class_id) // self.n_base
        return np.rot90(block, k, axes=(1, 2)) if k else block


@dataclass
class SplitAssignment:
    """Class id -> section ('train', 'val' or 'test')."""

    sections: dict
    seed: int

    def section_ids(self, section):
        if section not in SECTIONS:
            raise StructuralError(f"unknown section '{section}'")
        cache = self.__dict__.setdefault("_cache", {})
        if section not in cache:
            cache[section] = np.array(sorted(k for k, s in self.sections.items() if s == section),
                                      dtype=np.int64)
        return cache[section]

    def counts(self):
        return tuple(len(self.section_ids(s)) for s in SECTIONS)


def split_classes(pool: ClassPool, seed, counts=None) -> SplitAssignment:
    """Shuffle the base classes with ``seed`` and cut them into train/val/test.

    ``counts`` defaults to the Omniglot protocol (1150/50/423), which then
    requires exactly 1623 classes.
    """
    if pool.n_classes != pool.n_base:
        raise StructuralError("split the base pool before rotation augmentation")
    if counts is None:
        if pool.n_classes != OMNIGLOT_CLASSES:
            raise StructuralError(
                f"Omniglot split needs {OMNIGLOT_CLASSES} classes, pool has {pool.n_classes}"
            )
        counts = OMNIGLOT_SPLIT
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0 or sum(counts) != pool.n_classes:
        raise StructuralError(f"split counts {counts} do not partition {pool.n_classes} classes")
    order = np.random.default_rng(seed).permutation(pool.class_ids)
    bounds = np.cumsum(counts)
    sections = {}
    for idx, cid in enumerate(order):
        sections[int(cid)] = SECTIONS[int(np.searchsorted(bounds, idx, side="right"))]
    return SplitAssignment(sections, seed)


def augment_rotations(pool: ClassPool, split: SplitAssignment):
    """Add 90/180/270 degree rotated copies of every base class as new classes.

    Each rotated class inherits the section of its base class.  Images are
    rotated lazily when episodes are assembled.
    """
    if pool.n_classes != pool.n_base:
        raise StructuralError("pool is already augmented")
    base = pool.classes[:, 0]
    classes = np.concatenate([np.stack([base, np.full_like(base, k)], axis=1) for k in range(4)])
    augmented = ClassPool(pool.images, pool.origin, list(pool.names), classes)
    sections = {int(cid): split.sections[pool.base_of(cid)] for cid in augmented.class_ids}
    return augmented, SplitAssignment(sections, split.seed)
