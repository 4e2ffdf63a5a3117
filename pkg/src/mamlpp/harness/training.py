"""The outer training loop: epochs of meta-updates, per-epoch validation on
a fixed task set, epoch checkpoints, then a top-3 ensemble on the test set."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import (
    N_EVAL_TASKS,
    augment_rotations,
    fixed_eval_set,
    load_omniglot,
    sample_episode,
    split_classes,
    synth_glyph_pool,
)
from ..errors import DataError, NumericError
from ..meta import MetaLearner
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .evaluation import EvalResult, evaluate, select_top3, test_with_ensemble
from .metrics import (
    MetricsRecord,
    MetricsWriter,
    SeedResult,
    read_metrics,
    record_from_metrics,
    timing_by_order,
    truncate_after,
    write_summary,
)

log = logging.getLogger(__name__)

# the test set must not coincide with the validation stream
TEST_SEED_OFFSET = 1


@dataclass
class DataBundle:
    pool: object
    split: object
    val_tasks: list
    test_tasks: list = field(default_factory=list)


def build_data(config: ExperimentConfig, with_test=True) -> DataBundle:
    """Pool, split and the fixed validation/test task sets for ``config``."""
    d = config.dataset
    counts = tuple(d.split_counts) if d.split_counts else None
    if d.source == "omniglot":
        if not d.root:
            raise DataError("dataset.root is not set (config or MAMLPP_DATA_ROOT)")
        pool = load_omniglot(d.root, d.image_size, d.instances_per_class)
    else:
        pool = synth_glyph_pool(d.n_classes, d.instances_per_class, d.image_size, d.noise, d.jitter,
                                rng=d.pool_seed)
    split = split_classes(pool, d.split_seed, counts)
    if d.augment_rotations:
        pool, split = augment_rotations(pool, split)
    shape = (d.n_way, d.k_shot, d.q_targets)
    val = fixed_eval_set(pool, split, "val", *shape, d.eval_seed, d.n_eval_tasks)
    test = []
    if with_test:
        test = fixed_eval_set(pool, split, "test", *shape, d.eval_seed + TEST_SEED_OFFSET, d.n_eval_tasks)
    return DataBundle(pool, split, val, test)


def make_learner(config: ExperimentConfig) -> MetaLearner:
    return MetaLearner(config.network_spec(), config.meta, config.total_iterations,
                       config.run.iterations_per_epoch)


def seed_dir(config: ExperimentConfig, seed) -> Path:
    return Path(config.run.output_dir) / config.run.name / f"seed_{seed}"


def epoch_checkpoint(directory, epoch) -> Path:
    return Path(directory) / f"epoch_{epoch:03d}.ckpt"


class Trainer:
    """One seed of meta-training.

    The initialization and the training task stream draw from separate
    generators derived from the seed; the validation and test sets have
    their own fixed seeds, so training never perturbs them.
    """

    def __init__(self, config: ExperimentConfig, seed: int, data: DataBundle, out_dir=None):
        self.config = config
        self.seed = int(seed)
        self.data = data
        self.learner = make_learner(config)
        self.dtype = np.dtype(config.run.precision)
        init_ss, train_ss = np.random.SeedSequence(self.seed).spawn(2)
        self.state = self.learner.init_state(np.random.default_rng(init_ss), self.dtype)
        self.rng = np.random.default_rng(train_ss)
        self.epoch = 0
        self.iteration = 0
        self.history = []
        self.out_dir = Path(out_dir) if out_dir is not None else seed_dir(config, seed)
        self.run_id = f"{config.run.name}-seed{self.seed}"

    # single steps -----------------------------------------------------------
    def next_batch(self):
        d = self.config.dataset
        batch = [sample_episode(self.data.pool, self.data.split, "train", d.n_way, d.k_shot, d.q_targets,
                                self.rng) for _ in range(self.config.meta.batch_size)]
        for ep in batch:
            ep.materialize()
        return batch

    def step(self) -> dict:
        """One outer update; the caller handles epoch boundaries."""
        episodes = self.next_batch()
        self.state, metrics = self.learner.outer_update(self.state, episodes, self.epoch, self.iteration)
        self.iteration += 1
        return metrics

    def validate(self) -> EvalResult:
        return evaluate(self.learner, self.state, self.data.val_tasks)

    # checkpoints ------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.state, self.epoch, self.iteration, self.config.to_dict(), self.config.digest(),
            {"train": self.rng.bit_generator.state},
            {"seed": self.seed, "history": self.history},
        )

    def save(self, path):
        return save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, path, config: ExperimentConfig, data: DataBundle, out_dir=None):
        ckpt = load_checkpoint(path, config.digest())
        seed = ckpt.extra.get("seed", 0)
        trainer = cls(config, seed, data, out_dir)
        trainer.state = ckpt.state
        trainer.rng.bit_generator.state = ckpt.rng_states["train"]
        trainer.epoch = ckpt.epoch
        trainer.iteration = ckpt.iteration
        trainer.history = [tuple(h) for h in ckpt.extra.get("history", [])]
        return trainer

    # full run ---------------------------------------------------------------
    def run(self, resume=False) -> SeedResult:
        """Train to the configured epoch count, then test the top-3 ensemble.

        A non-finite loss or gradient stops this seed; the event is written
        to the metrics file and reported as diverged.
        """
        cfg = self.config.run
        self.out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.out_dir / "metrics.csv"
        if resume and metrics_path.exists():
            truncate_after(metrics_path, self.iteration)
        writer = MetricsWriter(metrics_path, append=resume)
        result = SeedResult(self.seed)
        try:
            while self.epoch < cfg.epochs:
                end = (self.epoch + 1) * cfg.iterations_per_epoch
                while self.iteration < end:
                    try:
                        m = self.step()
                    except NumericError as exc:
                        writer.write(MetricsRecord(self.run_id, self.seed, "diverged", self.epoch,
                                                   self.iteration, message=str(exc)))
                        log.warning("seed %d diverged: %s", self.seed, exc)
                        result.diverged = True
                        result.message = str(exc)
                        break
                    writer.write(record_from_metrics(self.run_id, self.seed, m))
                if result.diverged:
                    break
                val = self.validate()
                self.history.append((self.epoch, val.accuracy))
                writer.write(MetricsRecord(
                    self.run_id, self.seed, "epoch", self.epoch, self.iteration,
                    val_accuracy=val.accuracy, val_std_error=val.std_error, val_loss=val.loss))
                log.info("seed %d epoch %d: val %s", self.seed, self.epoch, val)
                self.epoch += 1
                if cfg.checkpoint_every_epoch:
                    self.save(epoch_checkpoint(self.out_dir, self.epoch - 1))
        finally:
            writer.close()
        records = read_metrics(metrics_path)
        result.ms_per_iteration = timing_by_order(records)
        if self.history:
            best_epoch, best = max(self.history, key=lambda h: (h[1], -h[0]))
            result.best_val_accuracy, result.best_epoch = best, best_epoch
        if not result.diverged and len(self.history) >= 3 and cfg.checkpoint_every_epoch and self.data.test_tasks:
            top = select_top3(self.history)
            states = [load_checkpoint(epoch_checkpoint(self.out_dir, e)).state for e in top]
            test = test_with_ensemble(self.learner, states, self.data.test_tasks)
            result.ensemble_epochs = top
            result.test_accuracy, result.test_std_error = test.accuracy, test.std_error
        return result


@dataclass
class RunArtifacts:
    summary: dict
    results: list
    summary_path: Path


def run_training(config: ExperimentConfig, data: DataBundle | None = None, resume=None) -> RunArtifacts:
    """Train every seed in ``config.run.seeds`` and write the run summary.

    ``resume`` is a checkpoint path; the seed stored in it is resumed and
    the remaining seeds run from scratch.
    """
    data = data or build_data(config)
    results = []
    resumed_seed = None
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, config, data)
        resumed_seed = trainer.seed
        results.append(trainer.run(resume=True))
    for seed in config.run.seeds:
        if seed == resumed_seed:
            continue
        results.append(Trainer(config, seed, data).run())
    results.sort(key=lambda r: r.seed)
    path = Path(config.run.output_dir) / config.run.name / "summary.json"
    summary = write_summary(path, config.run.name, config.digest(), results)
    return RunArtifacts(summary, results, path)


__all__ = [
    "N_EVAL_TASKS", "DataBundle", "RunArtifacts", "Trainer", "build_data", "epoch_checkpoint",
    "make_learner", "run_training", "seed_dir",
]
