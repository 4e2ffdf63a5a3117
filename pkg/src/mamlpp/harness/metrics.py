"""Per-run metrics files and the cross-seed run summary.

A metrics file is CSV with a version comment on the first line.  Rows are
either ``iteration`` records (one per outer update) or ``epoch`` records
(one per epoch, carrying the validation result); ``diverged`` marks the row
at which a run stopped on a non-finite value.  List-valued columns are
``;``-joined and floats are written in shortest round-trip form, so files
parse back into identical records.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
VERSION_LINE = f"# mamlpp-metrics v{FORMAT_VERSION}"
KINDS = ("iteration", "epoch", "diverged")


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    kind: str
    epoch: int
    iteration: int
    loss: float | None = None
    support_losses: list = field(default_factory=list)
    target_losses: list = field(default_factory=list)
    accuracy: float | None = None
    lr: float | None = None
    order: str = ""
    weights: list = field(default_factory=list)
    grad_norm: float | None = None
    wall_ms: float | None = None
    val_accuracy: float | None = None
    val_std_error: float | None = None
    val_loss: float | None = None
    message: str = ""


COLUMNS = [f.name for f in fields(MetricsRecord)]
_INTS = {"seed", "epoch", "iteration"}
_LISTS = {"support_losses", "target_losses", "weights"}
_STRS = {"run_id", "kind", "order", "message"}


def _fmt(name, value):
    if name in _LISTS:
        return ";".join(repr(float(v)) for v in value)
    if value is None:
        return ""
    if name in _STRS or name in _INTS:
        return str(value)
    return repr(float(value))


def _parse(name, text):
    if name in _STRS:
        return text
    if name in _INTS:
        return int(text)
    if name in _LISTS:
        return [float(v) for v in text.split(";")] if text else []
    return float(text) if text else None


def record_from_metrics(run_id, seed, m: dict) -> MetricsRecord:
    """Row for one ``outer_update`` metrics dict."""
    return MetricsRecord(
        run_id, seed, "iteration", m["epoch"], m["iteration"], m["loss"],
        list(m["support_losses"]), list(m["target_losses"]), m["accuracy"], m["lr"],
        m["order"], list(m["weights"]), m["grad_norm"], m["wall_ms"],
    )


class MetricsWriter:
    """Append-only writer; every row is flushed as it is written."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._csv = csv.writer(self._fh)
        if fresh:
            self._fh.write(VERSION_LINE + "\n")
            self._csv.writerow(COLUMNS)
            self._fh.flush()

    def write(self, record: MetricsRecord):
        if record.kind not in KINDS:
            raise ValueError(f"unknown record kind {record.kind!r}")
        self._csv.writerow([_fmt(c, getattr(record, c)) for c in COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def truncate_after(path, iteration):
    """Drop rows past ``iteration`` (used when resuming from a checkpoint)."""
    records = [r for r in read_metrics(path) if r.iteration < iteration
               or (r.kind == "epoch" and r.iteration <= iteration)]
    with MetricsWriter(path) as w:
        for r in records:
            w.write(r)
    return records


def read_metrics(path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != VERSION_LINE:
            raise ValueError(f"{path}: expected '{VERSION_LINE}', found '{first}'")
        reader = csv.reader(fh)
        header = next(reader)
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        return [MetricsRecord(**{c: _parse(c, v) for c, v in zip(COLUMNS, row)}) for row in reader]


def epoch_history(records) -> list:
    """``[(epoch, val_accuracy), ...]`` in epoch order."""
    return [(r.epoch, r.val_accuracy) for r in records if r.kind == "epoch"]


def timing_by_order(records) -> dict:
    """Mean wall-ms per outer iteration, split by derivative order."""
    out = {}
    for order in ("first", "second"):
        ms = [r.wall_ms for r in records if r.kind == "iteration" and r.order == order]
        out[order] = float(np.mean(ms)) if ms else None
    return out


def _mean_std(values):
    values = [v for v in values if v is not None and math.isfinite(v)]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


@dataclass
class SeedResult:
    seed: int
    diverged: bool = False
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    ensemble_epochs: list = field(default_factory=list)
    test_accuracy: float | None = None
    test_std_error: float | None = None
    ms_per_iteration: dict = field(default_factory=dict)
    message: str = ""


def write_summary(path, run_name, config_digest, results) -> dict:
    """Write the run summary as JSON and return it.

    ``test_std_error`` is the standard error over the evaluation tasks of
    one seed; ``*_std_across_seeds`` is the population std of per-seed
    values.  Both are reported because they answer different questions.
    """
    val_mean, val_std = _mean_std([r.best_val_accuracy for r in results])
    test_mean, test_std = _mean_std([r.test_accuracy for r in results])
    timing = {}
    for order in ("first", "second"):
        timing[order], _ = _mean_std([r.ms_per_iteration.get(order) for r in results])
    summary = {
        "run": run_name,
        "config_digest": config_digest,
        "format_version": FORMAT_VERSION,
        "seeds": [asdict(r) for r in results],
        "val_accuracy_mean": val_mean,
        "val_accuracy_std_across_seeds": val_std,
        "test_accuracy_mean": test_mean,
        "test_accuracy_std_across_seeds": test_std,
        "ms_per_iteration": timing,
        "diverged_seeds": [r.seed for r in results if r.diverged],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2) + "\n")
    return summary
