"""Bilevel optimization: inner-loop adaptation and the outer meta-update.

The inner loop takes ``N`` gradient steps on a task's support set starting
from the meta-learned initialization.  The outer loop scores the adapted
parameters on the task's target set and differentiates that score back
through the unrolled inner loop, optionally treating the inner gradients as
constants (first order).
"""

from __future__ import annotations

import time
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..autodiff import ParamSet, Tensor, cross_entropy, gradients, no_record, stop_gradient
from ..errors import NumericError, StructuralError
from ..network import BatchNormState, NetworkSpec, build_network, forward, is_per_step, layer_group
from .adam import AdamState, adam_step
from .schedules import anneal_loss_weights, cosine_lr, derivative_order

LSLR_PREFIX = "lslr/"


@dataclass
class MetaConfig:
    """Outer/inner loop hyperparameters and the six MAML++ switches.

    All switches off is the original MAML; all on is MAML++.
    """

    inner_steps: int = 5
    batch_size: int = 16
    inner_lr: float = 0.1
    msl: bool = True
    lslr: bool = True
    bnrs: bool = True
    bnwb: bool = True
    da: bool = True
    ca: bool = True
    da_switch_epoch: int = 50
    msl_epochs: float = 100
    msl_floor: float = 0.001
    msl_anneal_per: str = "epoch"
    include_pre_update_loss: bool = False
    lr_max: float = 0.001
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    eval_inner_steps: int | None = None
    bnwb_biases_only: bool = False
    bn_normalize: str = "running"

    @classmethod
    def maml(cls, **overrides):
        off = dict(msl=False, lslr=False, bnrs=False, bnwb=False, da=False, ca=False)
        off.update(overrides)
        return cls(**off)

    @classmethod
    def mamlpp(cls, **overrides):
        return cls(**overrides)

    def validate(self):
        if self.inner_steps < 1:
            raise StructuralError("inner_steps must be >= 1")
        if self.batch_size < 1:
            raise StructuralError("batch_size must be >= 1")
        if self.msl_anneal_per not in ("epoch", "iteration"):
            raise StructuralError("msl_anneal_per must be 'epoch' or 'iteration'")
        if self.bn_normalize not in ("running", "batch"):
            raise StructuralError("bn_normalize must be 'running' or 'batch'")
        if self.eval_inner_steps is not None and self.eval_inner_steps < 1:
            raise StructuralError("eval_inner_steps must be >= 1")

    @property
    def n_eval_steps(self):
        return self.eval_inner_steps or self.inner_steps

    def network_spec(self, base: NetworkSpec) -> NetworkSpec:
        """``base`` with BN modes and step slots implied by the switches."""
        if self.bnwb:
            params = "per_step_bias" if self.bnwb_biases_only else "per_step"
        else:
            params = "shared"
        return replace(
            base,
            bn_mode="per_step" if self.bnrs else "batch",
            bn_params=params,
            max_steps=max(self.inner_steps, self.n_eval_steps),
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class MetaState:
    """Everything the outer loop learns or carries between iterations."""

    theta0: ParamSet
    inner_lrs: ParamSet
    bn: BatchNormState
    adam: AdamState

    def trainables(self) -> ParamSet:
        return ParamSet(list(self.theta0.items()) + list(self.inner_lrs.items()))

    def with_trainables(self, params: ParamSet, adam: AdamState) -> "MetaState":
        theta = params.subset([k for k in params if not k.startswith(LSLR_PREFIX)])
        lrs = params.subset([k for k in params if k.startswith(LSLR_PREFIX)])
        return MetaState(theta, lrs, self.bn, adam)

    def lr_table(self):
        """Learned rates as ``{group: [alpha_step1, ..., alpha_stepN]}``."""
        table = {}
        for name, t in self.inner_lrs.items():
            group, step = name[len(LSLR_PREFIX):].rsplit("/step", 1)
            table.setdefault(group, {})[int(step)] = float(t.data)
        return {g: [steps[i] for i in sorted(steps)] for g, steps in table.items()}


@dataclass
class AdaptationTrajectory:
    params: list
    support_losses: list = field(default_factory=list)
    support_accuracy: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.params) - 1


def inner_step(params: ParamSet, support_grads: ParamSet, lr, create_graph=True) -> ParamSet:
    """One gradient step ``theta_i = theta_{i-1} - lr * grad`` on the entries of
    ``support_grads``; all other entries of ``params`` pass through.

    ``lr`` is a float, a scalar tensor, or a mapping from parameter name to
    either.  Without ``create_graph`` the result is a fresh set of leaves.
    """
    params.subset(list(support_grads)).require_compatible(support_grads, "parameters and gradients")
    updates = []
    for name, g in support_grads.items():
        rate = lr[name] if isinstance(lr, Mapping) else lr
        p = params[name]
        if create_graph:
            updates.append((name, p - rate * g))
        else:
            value = float(rate.data) if isinstance(rate, Tensor) else float(rate)
            updates.append((name, Tensor(p.data - p.dtype.type(value) * g.data, requires_grad=True)))
    return params.updated(ParamSet(updates))


class MetaLearner:
    """MAML / MAML++ over a base network.

    ``spec`` is taken as-is; use :meth:`MetaConfig.network_spec` to derive
    the BN modes from the switches.
    """

    def __init__(self, spec: NetworkSpec, config: MetaConfig,
                 total_iterations: int = 1, iterations_per_epoch: int = 1):
        config.validate()
        spec.validate()
        if spec.max_steps < config.n_eval_steps or spec.max_steps < config.inner_steps:
            raise StructuralError(
                f"network allocates {spec.max_steps} step slots, config needs "
                f"{max(config.inner_steps, config.n_eval_steps)}"
            )
        self.spec = spec
        self.config = config
        self.total_iterations = total_iterations
        self.iterations_per_epoch = iterations_per_epoch

    # state --------------------------------------------------------------
    def init_state(self, rng, dtype=None) -> MetaState:
        theta0, bn = build_network(self.spec, rng, dtype)
        lrs = []
        if self.config.lslr:
            dt = theta0["linear/weight"].dtype
            for group in self.groups(theta0):
                for i in range(1, self.spec.max_steps + 1):
                    lrs.append((f"{LSLR_PREFIX}{group}/step{i}",
                                Tensor(np.asarray(self.config.inner_lr, dtype=dt), requires_grad=True)))
        lrs = ParamSet(lrs)
        state = MetaState(theta0, lrs, bn, AdamState())
        c = self.config
        state.adam = AdamState.zeros_for(state.trainables(), c.adam_beta1, c.adam_beta2, c.adam_eps)
        return state

    @staticmethod
    def adapted_names(theta0: ParamSet):
        """Entries updated by the inner loop (per-step BN parameters are not)."""
        return [k for k in theta0 if not is_per_step(k)]

    def groups(self, theta0: ParamSet):
        seen = []
        for name in self.adapted_names(theta0):
            g = layer_group(name)
            if g not in seen:
                seen.append(g)
        return seen

    def _rates(self, state: MetaState, names, step):
        if not self.config.lslr:
            return self.config.inner_lr
        return {n: state.inner_lrs[f"{LSLR_PREFIX}{layer_group(n)}/step{step}"] for n in names}

    # schedules ----------------------------------------------------------
    def order_for(self, epoch):
        return derivative_order(epoch, self.config.da_switch_epoch) if self.config.da else "second"

    def lr_for(self, iteration):
        c = self.config
        if not c.ca:
            return c.lr_max
        return cosine_lr(min(iteration, self.total_iterations), self.total_iterations, c.lr_max, c.lr_min)

    def loss_weights(self, epoch, iteration=None):
        c = self.config
        when = epoch
        if c.msl_anneal_per == "iteration" and iteration is not None:
            when = iteration / max(self.iterations_per_epoch, 1)
        return anneal_loss_weights(when, c.inner_steps, c.msl_epochs, c.msl_floor,
                                   c.include_pre_update_loss)

    # inner loop ---------------------------------------------------------
    def adapt(self, state: MetaState, support_x, support_y, n_steps=None,
              order="second", training=True) -> AdaptationTrajectory:
        """Unroll ``n_steps`` inner updates on the support set.

        ``training=False`` is the inference path: nothing stays connected to
        the meta-parameters and BN running statistics are left untouched.
        """
        n = n_steps or self.config.inner_steps
        if n < 1:
            raise StructuralError("need at least one inner step")
        if n > self.spec.max_steps:
            raise StructuralError(f"{n} inner steps exceed the {self.spec.max_steps} allocated BN slots")
        if len(support_y) == 0:
            raise StructuralError("empty support set")
        names = self.adapted_names(state.theta0)
        keep = set(names)
        if training:
            params = state.theta0
            if not all(params[k].requires_grad for k in names):
                # constant leaves would get zero support gradients
                params = ParamSet((k, Tensor(v.data, requires_grad=True) if k in keep and not v.requires_grad
                                   else v) for k, v in params.items())
        else:
            params = ParamSet((k, Tensor(v.data, requires_grad=k in keep)) for k, v in state.theta0.items())
        second = training and order == "second"
        traj = AdaptationTrajectory([params])
        for i in range(1, n + 1):
            mode = self.bn_mode(state, i - 1, training)
            logits = forward(self.spec, params, state.bn, support_x, i - 1, mode, update_stats=training)
            loss = cross_entropy(logits, support_y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite support loss at inner step {i}",
                                   {"support_losses": traj.support_losses + [value]})
            grads = gradients(loss, params.subset(names), create_graph=second)
            if not second:
                grads = grads.map(stop_gradient)
            rates = self._rates(state, names, i)
            params = inner_step(params, grads, rates, create_graph=training)
            traj.params.append(params)
            traj.support_losses.append(value)
            traj.support_accuracy.append(float(np.mean(np.argmax(logits.data, 1) == np.asarray(support_y))))
        return traj

    # meta objective -----------------------------------------------------
    def bn_mode(self, state, step, training=True, target=False):
        """Forward mode for BN slot ``step``.

        With ``bn_normalize="running"`` every forward, support or target,
        normalizes by the slot's running statistics once it has any, and
        training forwards still fold their batch statistics into the slot.
        Adaptation and scoring then see one normalization, in training and at
        inference alike.  ``"batch"`` normalizes training forwards by the
        batch and only inference targets by running statistics.
        """
        if state.bn.mode == "batch":
            return "train"
        if self.config.bn_normalize == "running" and state.bn.n_updates(step) > 0:
            return "eval"
        return "eval" if target and not training else "train"

    def target_loss(self, state, params, step, target_x, target_y, training=True):
        logits = forward(self.spec, params, state.bn, target_x, step,
                         self.bn_mode(state, step, training, target=True), update_stats=training)
        return cross_entropy(logits, target_y), logits

    def meta_loss_vanilla(self, state, trajectories, targets, details=None):
        """Sum over tasks of the target loss after the final inner step."""
        total = None
        for traj, (tx, ty) in zip(trajectories, targets):
            loss, logits = self.target_loss(state, traj.params[-1], traj.n_steps, tx, ty)
            total = loss if total is None else total + loss
            if details is not None:
                details.append([(traj.n_steps, float(loss.data), _accuracy(logits, ty))])
        return total

    def step_indices(self, n_steps):
        start = 0 if self.config.include_pre_update_loss else 1
        return list(range(start, n_steps + 1))

    def multi_step_meta_loss(self, state, trajectories, targets, weights, details=None):
        """Sum over tasks of the ``weights``-weighted per-step target losses.

        Steps with zero weight are skipped.  When ``details`` is a list, one
        ``(step, loss, accuracy)`` list per task is appended to it.
        """
        weights = np.asarray(weights, dtype=np.float64)
        total = None
        for traj, (tx, ty) in zip(trajectories, targets):
            steps = self.step_indices(traj.n_steps)
            if len(weights) != len(steps):
                raise StructuralError(
                    f"{len(weights)} loss weights for {len(steps)} weighted steps {steps}"
                )
            rows = []
            for w, step in zip(weights, steps):
                if w == 0.0:
                    continue
                loss, logits = self.target_loss(state, traj.params[step], step, tx, ty)
                term = loss * float(w)
                total = term if total is None else total + term
                rows.append((step, float(loss.data), _accuracy(logits, ty)))
            if details is not None:
                details.append(rows)
        return total

    # outer loop ---------------------------------------------------------
    def task_objective(self, state, episode, order, weights):
        """Adapt on one episode and return (meta loss, trajectory, rows)."""
        traj = self.adapt(state, episode.support_x, episode.support_y, order=order)
        targets = [(episode.target_x, episode.target_y)]
        details = []
        if weights is None:
            loss = self.meta_loss_vanilla(state, [traj], targets, details)
        else:
            loss = self.multi_step_meta_loss(state, [traj], targets, weights, details)
        return loss, traj, details[0]

    def outer_update(self, state: MetaState, episodes, epoch: int, iteration: int):
        """One meta-update over a batch of episodes.

        Gradients are taken per task and summed in task order, which equals
        the gradient of the summed objective.  Returns ``(new_state, metrics)``.
        """
        if len(episodes) < 1:
            raise StructuralError("task batch must contain at least one episode")
        start = time.perf_counter()
        order = self.order_for(epoch)
        weights = self.loss_weights(epoch, iteration) if self.config.msl else None
        trainables = state.trainables()
        total = None
        loss_sum = 0.0
        support, target, acc = [], {}, []
        for ep in episodes:
            loss, traj, rows = self.task_objective(state, ep, order, weights)
            value = float(loss.data)
            support.append(traj.support_losses)
            for step, l, _ in rows:
                target.setdefault(step, []).append(l)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite meta-loss at epoch {epoch}, iteration {iteration}",
                    {"support_losses": support, "target_losses": target, "order": order},
                )
            loss_sum += value
            grads = gradients(loss, trainables)
            total = grads.numpy() if total is None else {k: total[k] + grads[k].data for k in total}
            final = [r for r in rows if r[0] == traj.n_steps]
            acc.append(final[0][2] if final else self._final_accuracy(state, traj, ep))
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in total.values())))
        if not np.isfinite(norm):
            raise NumericError(
                f"non-finite meta-gradient at epoch {epoch}, iteration {iteration}",
                {"support_losses": support, "target_losses": target, "order": order},
            )
        c = self.config
        if c.max_grad_norm is not None and norm > c.max_grad_norm:
            factor = c.max_grad_norm / norm
            total = {k: g * g.dtype.type(factor) for k, g in total.items()}
        lr = self.lr_for(iteration)
        grads = ParamSet((k, Tensor(v)) for k, v in total.items())
        new_params, new_adam = adam_step(trainables, grads, state.adam, lr)
        new_state = state.with_trainables(new_params, new_adam)
        metrics = {
            "epoch": epoch,
            "iteration": iteration,
            "loss": loss_sum,
            "support_losses": [float(np.mean(col)) for col in zip(*support)],
            "target_losses": [float(np.mean(target[s])) for s in sorted(target)],
            "accuracy": float(np.mean(acc)),
            "grad_norm": norm,
            "lr": lr,
            "order": order,
            "weights": [] if weights is None else [float(w) for w in weights],
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        }
        return new_state, metrics

    def _final_accuracy(self, state, traj, ep):
        with no_record():
            mode = self.bn_mode(state, traj.n_steps, target=True)
            logits = forward(self.spec, traj.params[-1], state.bn, ep.target_x, traj.n_steps,
                             mode, update_stats=False)
        return _accuracy(logits, ep.target_y)

    # inference ----------------------------------------------------------
    def predict_proba(self, state: MetaState, support_x, support_y, target_x, n_steps=None):
        """Adapt on the support set, then class probabilities for the targets
        using the final step slot's running statistics."""
        n = n_steps or self.config.n_eval_steps
        traj = self.adapt(state, support_x, support_y, n, order="first", training=False)
        with no_record():
            mode = self.bn_mode(state, n, training=False, target=True)
            logits = forward(self.spec, traj.params[-1], state.bn, target_x, n, mode,
                             update_stats=False).data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def _accuracy(logits, labels):
    return float(np.mean(np.argmax(logits.data, 1) == np.asarray(labels)))
