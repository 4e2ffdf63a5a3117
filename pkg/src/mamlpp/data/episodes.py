"""N-way K-shot episode sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import SamplingError
from .pool import ClassPool, SplitAssignment

N_EVAL_TASKS = 600


@dataclass(eq=False)
class Episode:
    """One few-shot task.

    Stores only indices; ``support_x``/``target_x`` are assembled from the
    pool on access as ``[n, 1, H, W]`` float32 arrays.  ``classes[j]`` is the
    pool class id that carries label ``j``.
    """

    pool: ClassPool
    classes: np.ndarray
    support_idx: np.ndarray  # [n_support, 2] rows of (label, instance)
    target_idx: np.ndarray
    task_id: str
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_way(self):
        return len(self.classes)

    @property
    def support_y(self):
        return self.support_idx[:, 0]

    @property
    def target_y(self):
        return self.target_idx[:, 0]

    def _images(self, idx):
        out = np.empty((len(idx), 1) + tuple(self.pool.image_shape), dtype=np.float32)
        for label in range(self.n_way):
            rows = np.flatnonzero(idx[:, 0] == label)
            if len(rows):
                out[rows, 0] = self.pool.gather(self.classes[label], idx[rows, 1])
        return out

    @property
    def support_x(self):
        if "support" in self._cache:
            return self._cache["support"]
        return self._images(self.support_idx)

    @property
    def target_x(self):
        if "target" in self._cache:
            return self._cache["target"]
        return self._images(self.target_idx)

    def materialize(self):
        """Assemble and keep the image arrays (used to keep loading out of timings)."""
        self._cache["support"] = self._images(self.support_idx)
        self._cache["target"] = self._images(self.target_idx)
        return self

    def instance_keys(self, which="support"):
        idx = self.support_idx if which == "support" else self.target_idx
        return {(int(self.classes[l]), int(i)) for l, i in idx}

    def same_as(self, other) -> bool:
        return (
            self.task_id == other.task_id
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.support_idx, other.support_idx)
            and np.array_equal(self.target_idx, other.target_idx)
        )


def _task_id(classes, support, target):
    h = hashlib.sha1()
    for arr in (classes, support, target):
        h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def sample_episode(pool: ClassPool, split: SplitAssignment, section, n_way, k_shot,
                   q_targets, rng) -> Episode:
    """Draw ``n_way`` distinct classes from ``section`` and, per class,
    ``k_shot`` support plus ``q_targets`` target instances without replacement.
    Labels are a fresh random permutation of the drawn classes."""
    ids = split.section_ids(section)
    if len(ids) < n_way:
        raise SamplingError(f"section '{section}' has {len(ids)} classes, need {n_way}")
    per_class = k_shot + q_targets
    if pool.instances_per_class < per_class:
        raise SamplingError(
            f"classes have {pool.instances_per_class} instances, need {per_class} "
            f"({k_shot} support + {q_targets} target)"
        )
    drawn = rng.choice(ids, size=n_way, replace=False)
    labels = rng.permutation(n_way)
    classes = np.empty(n_way, dtype=np.int64)
    classes[labels] = drawn
    support, target = [], []
    for label in range(n_way):
        inst = rng.choice(pool.instances_per_class, size=per_class, replace=False)
        support += [(label, i) for i in inst[:k_shot]]
        target += [(label, i) for i in inst[k_shot:]]
    support = np.asarray(support, dtype=np.int64).reshape(-1, 2)[rng.permutation(len(support))]
    target = np.asarray(target, dtype=np.int64).reshape(-1, 2)[rng.permutation(len(target))]
    return Episode(pool, classes, support, target, _task_id(classes, support, target))


def fixed_eval_set(pool: ClassPool, split: SplitAssignment, section, n_way, k_shot, q_targets,
                   eval_seed, n_tasks=N_EVAL_TASKS) -> list:
    """``n_tasks`` distinct episodes from a generator seeded only by ``eval_seed``.

    The same arguments always give the same episodes, independent of any
    other random stream in the run.
    """
    rng = np.random.default_rng(eval_seed)
    episodes, seen = [], set()
    attempts = 0
    while len(episodes) < n_tasks:
        ep = sample_episode(pool, split, section, n_way, k_shot, q_targets, rng)
        attempts += 1
        if ep.task_id in seen:
            if attempts > 100 * n_tasks:
                raise SamplingError(f"cannot draw {n_tasks} unique tasks from section '{section}'")
            continue
        seen.add(ep.task_id)
        episodes.append(ep)
    return episodes


class EpisodeStream:
    """Endless training episodes from one section, driven by its own generator."""

    def __init__(self, pool, split, section, n_way, k_shot, q_targets, rng):
        self.pool, self.split, self.section = pool, split, section
        self.n_way, self.k_shot, self.q_targets = n_way, k_shot, q_targets
        self.rng = rng

    def batch(self, size):
        return [
            sample_episode(self.pool, self.split, self.section, self.n_way, self.k_shot,
                           self.q_targets, self.rng)
            for _ in range(size)
        ]
