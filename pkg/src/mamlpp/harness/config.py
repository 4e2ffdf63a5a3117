"""Experiment configuration: dataset, network, meta and run blocks.

Configs are YAML files with one mapping per block.  Two environment
variables override paths::

    MAMLPP_DATA_ROOT     dataset.root
    MAMLPP_OUTPUT_DIR    run.output_dir

and any field can then be overridden as ``block.field=value``.  Later
sources win: file, environment, explicit overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..errors import ConfigError, StructuralError
from ..meta import MetaConfig
from ..network import NetworkSpec

ENV_DATA_ROOT = "MAMLPP_DATA_ROOT"
ENV_OUTPUT_DIR = "MAMLPP_OUTPUT_DIR"
PRECISIONS = ("float32", "float64")


@dataclass
class DatasetConfig:
    source: str = "omniglot"
    root: str | None = None
    image_size: int = 28
    n_way: int = 5
    k_shot: int = 1
    q_targets: int = 15
    eval_seed: int = 0
    split_seed: int = 0
    n_eval_tasks: int = 600
    augment_rotations: bool = True
    # synthetic pools only
    n_classes: int = 1623
    instances_per_class: int = 20
    noise: float = 0.05
    jitter: float = 0.5
    pool_seed: int = 0
    split_counts: list | None = None

    def validate(self):
        if self.source not in ("omniglot", "synthetic"):
            raise ConfigError(f"dataset.source must be 'omniglot' or 'synthetic', got {self.source!r}")
        for name in ("image_size", "n_way", "k_shot", "q_targets", "n_eval_tasks", "instances_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        if self.k_shot + self.q_targets > self.instances_per_class:
            raise ConfigError(
                f"k_shot + q_targets = {self.k_shot + self.q_targets} exceeds "
                f"{self.instances_per_class} instances per class"
            )
        if self.split_counts is not None:
            if len(self.split_counts) != 3:
                raise ConfigError("dataset.split_counts needs three entries (train, val, test)")
            if self.source == "synthetic" and sum(self.split_counts) != self.n_classes:
                raise ConfigError(
                    f"dataset.split_counts sum to {sum(self.split_counts)}, pool has {self.n_classes} classes"
                )


@dataclass
class NetworkConfig:
    kind: str = "conv"
    conv_layers: int = 4
    filters: int = 64
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    hidden: list = field(default_factory=lambda: [64])
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass
class RunConfig:
    name: str = "run"
    epochs: int = 150
    iterations_per_epoch: int = 500
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    precision: str = "float32"
    output_dir: str = "runs"
    checkpoint_every_epoch: bool = True

    def validate(self):
        if self.epochs < 1 or self.iterations_per_epoch < 1:
            raise ConfigError("run.epochs and run.iterations_per_epoch must be >= 1")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"run.precision must be one of {PRECISIONS}")


BLOCKS = {"dataset": DatasetConfig, "network": NetworkConfig, "meta": MetaConfig, "run": RunConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = data or {}
        unknown = set(data) - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        blocks = {}
        for name, block_cls in BLOCKS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config block '{name}' must be a mapping")
            known = {f.name for f in fields(block_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            blocks[name] = block_cls(**values)
        cfg = cls(**blocks)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"ill-typed config value: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path, overrides=(), environ=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config '{path}': {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config '{path}' must be a mapping of blocks")
        return cls.from_dict(layered(data, overrides, environ))

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in BLOCKS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.to_yaml())

    def digest(self) -> str:
        """Hash of everything that affects results (paths and run name excluded)."""
        d = self.to_dict()
        d["dataset"].pop("root")
        d["run"].pop("output_dir")
        d["run"].pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # derived --------------------------------------------------------------
    def validate(self):
        self.dataset.validate()
        self.run.validate()
        try:
            self.meta.validate()
            self.network_spec().validate()
            if self.network.kind == "conv":
                self.network_spec().feature_maps()
        except StructuralError as exc:
            raise ConfigError(str(exc)) from exc

    def network_spec(self) -> NetworkSpec:
        n = self.network
        d = self.dataset
        shape = (1, d.image_size, d.image_size) if n.kind == "conv" else (d.image_size * d.image_size,)
        base = NetworkSpec(
            input_shape=shape, n_way=d.n_way, kind=n.kind, conv_layers=n.conv_layers,
            filters=n.filters, kernel=n.kernel, stride=n.stride, padding=n.padding,
            hidden=tuple(n.hidden), bn_eps=n.bn_eps, bn_momentum=n.bn_momentum,
        )
        return self.meta.network_spec(base)

    @property
    def total_iterations(self):
        return self.run.epochs * self.run.iterations_per_epoch

    def with_changes(self, **blocks) -> "ExperimentConfig":
        """Copy with fields replaced, e.g. ``with_changes(meta={"msl": False})``."""
        data = self.to_dict()
        for name, values in blocks.items():
            data[name].update(values)
        return ExperimentConfig.from_dict(data)


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _apply_override(data, item):
    key, sep, value = item.partition("=")
    block, dot, name = key.strip().partition(".")
    if not sep or not dot or block not in BLOCKS:
        raise ConfigError(f"override '{item}' must look like block.field=value")
    data.setdefault(block, {})
    if data[block] is None:
        data[block] = {}
    data[block][name] = _parse_value(value)


def _apply_environment(data, environ):
    for var, block, name in ((ENV_DATA_ROOT, "dataset", "root"), (ENV_OUTPUT_DIR, "run", "output_dir")):
        if environ.get(var):
            if data.get(block) is None:
                data[block] = {}
            data[block][name] = environ[var]


def layered(data: dict, overrides=(), environ=None) -> dict:
    """``data`` with environment variables, then ``overrides``, applied."""
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    _apply_environment(data, os.environ if environ is None else environ)
    for item in overrides:
        _apply_override(data, item)
    return data


# presets ------------------------------------------------------------------

def _paper_omniglot():
    return ExperimentConfig(
        DatasetConfig(source="omniglot"),
        NetworkConfig(filters=64),
        MetaConfig.mamlpp(inner_steps=5, batch_size=16, da_switch_epoch=50, msl_epochs=100),
        RunConfig(name="paper-omniglot", epochs=150, iterations_per_epoch=500),
    )


def _omniglot_desk():
    # DA switch and MSL horizon keep their fraction of the full 150-epoch schedule
    return ExperimentConfig(
        DatasetConfig(source="omniglot"),
        NetworkConfig(filters=32),
        MetaConfig.mamlpp(inner_steps=5, batch_size=8, da_switch_epoch=8, msl_epochs=17),
        RunConfig(name="omniglot-desk", epochs=25, iterations_per_epoch=100),
    )


def _synthetic_ci():
    return ExperimentConfig(
        DatasetConfig(source="synthetic", image_size=16, q_targets=5, n_classes=300,
                      split_counts=[200, 50, 50], augment_rotations=False, n_eval_tasks=600,
                      noise=0.05, jitter=0.3, pool_seed=1234, split_seed=1234),
        NetworkConfig(filters=16),
        MetaConfig.mamlpp(inner_steps=5, batch_size=4, da_switch_epoch=3, msl_epochs=5),
        RunConfig(name="synthetic-ci", epochs=8, iterations_per_epoch=250),
    )


PRESETS = {
    "paper-omniglot": _paper_omniglot,
    "omniglot-desk": _omniglot_desk,
    "synthetic-ci": _synthetic_ci,
}


def preset(name: str) -> ExperimentConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}") from None
    cfg.validate()
    return cfg


def load_config(source, overrides=(), environ=None) -> ExperimentConfig:
    """Config from a YAML file path or, failing that, a preset name."""
    path = Path(source)
    if path.is_file():
        return ExperimentConfig.load(path, overrides, environ)
    if str(source) in PRESETS:
        return ExperimentConfig.from_dict(layered(PRESETS[str(source)]().to_dict(), overrides, environ))
    raise ConfigError(f"'{source}' is neither a config file nor a preset ({', '.join(sorted(PRESETS))})")
