"""Training-time schedules: multi-step loss weights, derivative order and the
meta learning rate."""

from __future__ import annotations

import math

import numpy as np


def anneal_loss_weights(epoch, n_steps, horizon=100, floor=0.001, include_initial=False):
    """Per-step target-loss weights at (possibly fractional) ``epoch``.

    Starts uniform and moves linearly toward putting all weight on the final
    step, reaching it at ``epoch >= horizon``.  Non-final weights never drop
    below ``floor`` and the weights always sum to one.  With
    ``include_initial`` the vector has ``n_steps + 1`` entries (pre-update
    loss first), otherwise ``n_steps``.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    k = n_steps + 1 if include_initial else n_steps
    if k < 1:
        raise ValueError("need at least one weighted step")
    uniform = np.full(k, 1.0 / k)
    final = np.full(k, floor)
    final[-1] = 1.0 - floor * (k - 1)
    frac = 1.0 if horizon <= 0 else min(float(epoch) / horizon, 1.0)
    v = (1.0 - frac) * uniform + frac * final
    v[:-1] = np.maximum(v[:-1], floor)
    return v / v.sum()


def derivative_order(epoch, switch_epoch=50):
    """``"first"`` before ``switch_epoch``, ``"second"`` from then on."""
    return "first" if epoch < switch_epoch else "second"


def cosine_lr(iteration, total_iterations, lr_max=0.001, lr_min=1e-5):
    """Single-cycle cosine annealing from ``lr_max`` down to ``lr_min``."""
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    if iteration == 0 or total_iterations == 0:
        return lr_max
    if iteration == total_iterations:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * iteration / total_iterations))
