"""Command line entry points: ``train``, ``eval`` and ``inspect``.

Exit codes::

    0  success
    2  bad command line
    3  invalid configuration
    4  dataset could not be loaded or sampled
    5  every seed diverged
    6  checkpoint could not be read
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import CheckpointError, ConfigError, DataError, SelectionError, StructuralError
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, layered, load_config
from .evaluation import evaluate
from .training import build_data, make_learner, run_training

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5
EXIT_CHECKPOINT = 6


def _parser():
    p = argparse.ArgumentParser(prog="mamlpp", description="MAML / MAML++ few-shot meta-learning")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train every seed of a config")
    t.add_argument("--config", required=True, help="YAML config file or preset name")
    t.add_argument("--seed", type=int, help="train only this seed")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="output directory (overrides run.output_dir)")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="BLOCK.KEY=VALUE")

    e = sub.add_parser("eval", help="evaluate one checkpoint or a probability-averaged ensemble")
    e.add_argument("--ckpt", nargs="+", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--set", dest="overrides", action="append", default=[], metavar="BLOCK.KEY=VALUE")
    e.add_argument("--json", action="store_true", help="print the result as JSON")

    i = sub.add_parser("inspect", help="print learned inner-loop rates and loss weights")
    i.add_argument("--ckpt", required=True)
    return p


def _train(args):
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"run.output_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"run.seeds=[{args.seed}]")
    config = load_config(args.config, overrides)
    artifacts = run_training(config, resume=args.resume)
    s = artifacts.summary
    for r in artifacts.results:
        status = "diverged" if r.diverged else "ok"
        test = f"{100 * r.test_accuracy:.2f}%" if r.test_accuracy is not None else "n/a"
        best = f"{100 * r.best_val_accuracy:.2f}%" if r.best_val_accuracy is not None else "n/a"
        print(f"seed {r.seed}: {status}  best val {best} (epoch {r.best_epoch})  test {test}")
    print(f"summary: {artifacts.summary_path}")
    if len(s["diverged_seeds"]) == len(artifacts.results):
        return EXIT_DIVERGED
    return EXIT_OK


def _config_of(ckpt, overrides=()):
    return ExperimentConfig.from_dict(layered(ckpt.config, overrides))


def _eval(args):
    ckpts = [load_checkpoint(path) for path in args.ckpt]
    config = _config_of(ckpts[0], args.overrides)
    data = build_data(config, with_test=args.split == "test")
    tasks = data.test_tasks if args.split == "test" else data.val_tasks
    result = evaluate(make_learner(config), [c.state for c in ckpts], tasks)
    if args.json:
        print(json.dumps({"split": args.split, "members": args.ckpt, "accuracy": result.accuracy,
                          "std_error": result.std_error, "loss": result.loss, "tasks": len(tasks)}))
    else:
        print(f"{args.split}: {result}")
    return EXIT_OK


def _inspect(args):
    ckpt = load_checkpoint(args.ckpt)
    config = _config_of(ckpt)
    learner = make_learner(config)
    print(f"checkpoint  {args.ckpt}")
    print(f"epoch {ckpt.epoch}  iteration {ckpt.iteration}  config {ckpt.config_digest}")
    table = ckpt.state.lr_table()
    if table:
        steps = max(len(v) for v in table.values())
        width = max(len(g) for g in table)
        print("\nlearned inner-loop rates (alpha per layer group and step)")
        print(" " * width + "".join(f"{'step ' + str(i + 1):>11}" for i in range(steps)))
        for group, rates in table.items():
            print(group.ljust(width) + "".join(f"{r:11.5f}" for r in rates))
    else:
        print(f"\nfixed inner-loop rate {config.meta.inner_lr}")
    if config.meta.msl:
        w = learner.loss_weights(ckpt.epoch)
        steps = learner.step_indices(config.meta.inner_steps)
        print("\nper-step target loss weights at this epoch")
        print("  ".join(f"v{s}={x:.4f}" for s, x in zip(steps, w)))
    else:
        print("\nmulti-step loss off: final step only")
    counts = {layer: np.asarray(c).tolist() for layer, c in ckpt.state.bn.count.items()}
    if counts:
        layer = next(iter(counts))
        print(f"\nBN statistic updates per slot ({layer}): {counts[layer]}")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {"train": _train, "eval": _eval, "inspect": _inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StructuralError, SelectionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
