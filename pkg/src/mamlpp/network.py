"""The base learner: a strided conv classifier (or a small MLP) whose batch
normalization can keep statistics and affine parameters per inner-loop step."""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    add_bias,
    batch_normalize,
    batchnorm_apply,
    conv2d,
    conv_output_size,
    get_default_dtype,
    matmul,
    relu,
    reshape,
    running_normalize,
    transpose,
)
from .errors import NumericError, StructuralError

BN_MODES = ("batch", "shared", "per_step")
BN_PARAM_MODES = ("shared", "per_step", "per_step_bias")


@dataclass
class NetworkSpec:
    """Architecture of the base learner.

    ``kind="conv"`` stacks ``conv_layers`` blocks of conv -> BN -> ReLU over
    an NCHW ``input_shape``; ``kind="mlp"`` stacks linear -> BN -> ReLU
    blocks of widths ``hidden`` over a flat ``input_shape=(features,)``.
    Both end in a single linear head producing ``n_way`` logits.

    ``bn_mode``: ``batch`` always normalizes by the current batch and keeps
    no statistics (original MAML); ``shared`` keeps one running-statistics
    set; ``per_step`` keeps one per step slot.  ``bn_params``: one shared
    gamma/beta, one per step slot, or per-step beta with shared gamma.
    A per-step network has ``max_steps + 1`` slots; slot ``i`` is used for
    the forward pass under the parameters after ``i`` inner updates.
    """

    input_shape: tuple = (1, 28, 28)
    n_way: int = 5
    kind: str = "conv"
    conv_layers: int = 4
    filters: int = 64
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    hidden: tuple = (4,)
    bn_mode: str = "per_step"
    bn_params: str = "per_step"
    max_steps: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.hidden = tuple(self.hidden)

    def validate(self):
        if self.kind not in ("conv", "mlp"):
            raise StructuralError(f"unknown network kind '{self.kind}'")
        if self.bn_mode not in BN_MODES:
            raise StructuralError(f"bn_mode must be one of {BN_MODES}")
        if self.bn_params not in BN_PARAM_MODES:
            raise StructuralError(f"bn_params must be one of {BN_PARAM_MODES}")
        if self.n_way < 1:
            raise StructuralError("n_way must be >= 1")
        n_layers = self.conv_layers if self.kind == "conv" else len(self.hidden)
        if n_layers < 1:
            raise StructuralError("network needs at least one hidden layer")
        if self.max_steps < 1 and (self.bn_mode == "per_step" or self.bn_params != "shared"):
            raise StructuralError("per-step batch norm needs max_steps >= 1")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise StructuralError("bn_momentum must lie in (0, 1]")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise StructuralError(f"conv input_shape must be (C, H, W), got {self.input_shape}")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise StructuralError(f"mlp input_shape must be (features,), got {self.input_shape}")

    @property
    def layer_names(self):
        if self.kind == "conv":
            return [f"conv{i + 1}" for i in range(self.conv_layers)]
        return [f"fc{i + 1}" for i in range(len(self.hidden))]

    @property
    def n_slots(self):
        return self.max_steps + 1

    def feature_maps(self):
        """Spatial extent after every conv layer, checked to stay >= 1."""
        _, h, w = self.input_shape
        sizes = []
        for name in self.layer_names:
            h = conv_output_size(h, self.kernel, self.stride, self.padding)
            w = conv_output_size(w, self.kernel, self.stride, self.padding)
            if h < 1 or w < 1:
                raise StructuralError(
                    f"{name}: feature map collapses below 1x1 for input {self.input_shape}"
                )
            sizes.append((h, w))
        return sizes


def bn_param_names(spec: NetworkSpec, layer: str):
    """All BN affine parameter names of ``layer`` in allocation order."""
    per_gamma = spec.bn_params == "per_step"
    per_beta = spec.bn_params in ("per_step", "per_step_bias")
    names = []
    if per_gamma:
        names += [f"{layer}/bn/gamma/step{i}" for i in range(spec.n_slots)]
    else:
        names.append(f"{layer}/bn/gamma")
    if per_beta:
        names += [f"{layer}/bn/beta/step{i}" for i in range(spec.n_slots)]
    else:
        names.append(f"{layer}/bn/beta")
    return names


def _bn_names_for_step(spec, layer, step):
    gamma = f"{layer}/bn/gamma/step{step}" if spec.bn_params == "per_step" else f"{layer}/bn/gamma"
    beta = (
        f"{layer}/bn/beta/step{step}"
        if spec.bn_params in ("per_step", "per_step_bias")
        else f"{layer}/bn/beta"
    )
    return gamma, beta


def is_per_step(name: str) -> bool:
    return "/step" in name


def layer_group(name: str) -> str:
    """LSLR group of a parameter: ``conv1``, ``conv1/bn``, ``linear``..."""
    parts = name.split("/")
    if len(parts) > 1 and parts[1] == "bn":
        return f"{parts[0]}/bn"
    return parts[0]


class SlotStats(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    count: int


def update_running_stats(stats: SlotStats, batch_mean, batch_var, momentum) -> SlotStats:
    """Exponential moving average ``(1 - m) * old + m * batch``."""
    if not 0.0 < momentum <= 1.0:
        raise ValueError("momentum must lie in (0, 1]")
    keep = 1.0 - momentum
    return SlotStats(
        keep * stats.mean + momentum * np.asarray(batch_mean, dtype=stats.mean.dtype),
        keep * stats.var + momentum * np.asarray(batch_var, dtype=stats.var.dtype),
        stats.count + 1,
    )


@dataclass
class BatchNormState:
    """Running statistics for every BN layer and step slot.

    In ``shared`` and ``batch`` modes a single statistics set is stored and
    every step index maps onto it.
    """

    mode: str
    max_steps: int
    eps: float
    momentum: float
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def create(cls, spec: NetworkSpec, channels: dict, dtype=np.float32):
        slots = spec.n_slots if spec.bn_mode == "per_step" else 1
        state = cls(spec.bn_mode, spec.max_steps, spec.bn_eps, spec.bn_momentum)
        for layer, c in channels.items():
            state.mean[layer] = np.zeros((slots, c), dtype=dtype)
            state.var[layer] = np.ones((slots, c), dtype=dtype)
            state.count[layer] = np.zeros(slots, dtype=np.int64)
        return state

    def slot(self, step: int) -> int:
        if not 0 <= step <= self.max_steps:
            raise StructuralError(
                f"step index {step} outside allocated BN slots 0..{self.max_steps}"
            )
        return step if self.mode == "per_step" else 0

    def get(self, layer: str, step: int) -> SlotStats:
        s = self.slot(step)
        return SlotStats(self.mean[layer][s], self.var[layer][s], int(self.count[layer][s]))

    def n_updates(self, step: int) -> int:
        """Updates accumulated by slot ``step`` (the minimum over layers)."""
        s = self.slot(step)
        return min((int(c[s]) for c in self.count.values()), default=0)

    def update(self, layer: str, step: int, batch_mean, batch_var):
        """Fold batch statistics into slot ``step``; a no-op while frozen."""
        s = self.slot(step)
        if self.frozen:
            return
        new = update_running_stats(self.get(layer, step), batch_mean, batch_var, self.momentum)
        self.mean[layer][s] = new.mean
        self.var[layer][s] = new.var
        self.count[layer][s] = new.count

    def copy(self):
        return copy.deepcopy(self)

    @contextmanager
    def freeze(self):
        """Hold every statistic fixed, e.g. while checking gradients numerically."""
        previous = self.frozen
        self.frozen = True
        try:
            yield self
        finally:
            self.frozen = previous

    def arrays(self):
        out = {}
        for layer in self.mean:
            out[f"{layer}/mean"] = self.mean[layer]
            out[f"{layer}/var"] = self.var[layer]
            out[f"{layer}/count"] = self.count[layer]
        return out

    def load_arrays(self, arrays):
        for layer in self.mean:
            self.mean[layer] = np.array(arrays[f"{layer}/mean"])
            self.var[layer] = np.array(arrays[f"{layer}/var"])
            self.count[layer] = np.array(arrays[f"{layer}/count"])


def _uniform(rng, fan_in, shape, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_network(spec: NetworkSpec, rng, dtype=None):
    """Allocate and initialize parameters and BN state for ``spec``.

    Weights use fan-in scaled uniform initialization, biases start at zero,
    BN gamma at one and beta at zero.
    """
    spec.validate()
    dtype = np.dtype(dtype or get_default_dtype())
    entries = []
    channels = {}
    if spec.kind == "conv":
        spec.feature_maps()
        c_in = spec.input_shape[0]
        for name in spec.layer_names:
            fan_in = c_in * spec.kernel * spec.kernel
            entries.append((f"{name}/weight", _uniform(
                rng, fan_in, (spec.filters, c_in, spec.kernel, spec.kernel), dtype)))
            entries.append((f"{name}/bias", np.zeros(spec.filters, dtype)))
            channels[name] = spec.filters
            c_in = spec.filters
        h, w = spec.feature_maps()[-1]
        features = spec.filters * h * w
    else:
        f_in = spec.input_shape[0]
        for name, width in zip(spec.layer_names, spec.hidden):
            entries.append((f"{name}/weight", _uniform(rng, f_in, (f_in, width), dtype)))
            entries.append((f"{name}/bias", np.zeros(width, dtype)))
            channels[name] = width
            f_in = width
        features = f_in
    for name in spec.layer_names:
        for bn_name in bn_param_names(spec, name):
            fill = np.ones if "/gamma" in bn_name else np.zeros
            entries.append((bn_name, fill(channels[name], dtype)))
    entries.append(("linear/weight", _uniform(rng, features, (features, spec.n_way), dtype)))
    entries.append(("linear/bias", np.zeros(spec.n_way, dtype)))
    params = ParamSet((k, Tensor(v, requires_grad=True)) for k, v in entries)
    return params, BatchNormState.create(spec, channels, dtype)


def _bn_layer(spec, params, bn, h, layer, step, mode, update_stats):
    axis = h.ndim - 1
    if mode == "train" or bn.mode == "batch":
        if h.shape[0] < 2:
            raise NumericError(
                f"{layer}: batch statistics need at least 2 examples, got {h.shape[0]}",
                {"layer": layer},
            )
        xhat, bmean, bvar = batch_normalize(h, spec.bn_eps, axis)
        if bn.mode != "batch" and update_stats:
            bn.update(layer, step, bmean, bvar)
    else:
        stats = bn.get(layer, step)
        xhat = running_normalize(h, stats.mean, stats.var, spec.bn_eps, axis)
        if update_stats:
            # normalized by the statistics from before this batch
            axes = tuple(range(h.ndim - 1))
            bmean = h.data.mean(axis=axes)
            bvar = h.data.var(axis=axes)
            bn.update(layer, step, bmean, bvar)
    gamma, beta = _bn_names_for_step(spec, layer, step)
    return batchnorm_apply(xhat, params[gamma], params[beta], axis)


def forward(spec: NetworkSpec, params: ParamSet, bn: BatchNormState, inputs,
            step_index: int = 0, mode: str = "train", update_stats: bool | None = None) -> Tensor:
    """Logits of ``inputs`` under ``params`` using BN step slot ``step_index``.

    ``mode="train"`` normalizes by batch statistics; ``mode="eval"`` by the
    slot's running statistics (``batch`` BN mode always uses the batch).
    ``update_stats`` folds the batch statistics into the slot's running
    statistics afterwards; it defaults to true in train mode and false in
    eval mode, and never applies in ``batch`` BN mode.
    """
    if update_stats is None:
        update_stats = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    bn.slot(step_index)
    dtype = params["linear/weight"].dtype
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=dtype))
    if tuple(x.shape[1:]) != spec.input_shape:
        raise StructuralError(
            f"forward: inputs of shape {x.shape} do not match input shape {spec.input_shape}"
        )
    # activations run channels-last internally
    h = x
    if spec.kind == "conv":
        h = transpose(x, (0, 2, 3, 1)) if x.requires_grad else Tensor(
            np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)))
    for layer in spec.layer_names:
        if spec.kind == "conv":
            h = conv2d(h, params[f"{layer}/weight"], spec.stride, spec.padding, layout="NHWC")
            h = add_bias(h, params[f"{layer}/bias"], -1)
        else:
            h = matmul(h, params[f"{layer}/weight"]) + params[f"{layer}/bias"]
        h = _bn_layer(spec, params, bn, h, layer, step_index, mode, update_stats)
        h = relu(h)
    h = reshape(h, (h.shape[0], -1)) if h.ndim > 2 else h
    return matmul(h, params["linear/weight"]) + params["linear/bias"]
