# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # A short MAML++ run on procedural glyphs
#
# Omniglot is not needed to see the moving parts.  The synthetic pool draws
# each class as a few random strokes and perturbs every instance, which is
# enough structure for 5-way 1-shot episodes.
#
# The run below is deliberately tiny (under a minute on one core).  It
# shows the learned per-layer, per-step inner rates drifting from their
# initial value, the multi-step loss weights sliding toward the final step,
# and the per-step batch-norm slots collecting their own statistics.

# %%
import numpy as np

from mamlpp.harness.config import preset
from mamlpp.harness.evaluation import evaluate
from mamlpp.harness.training import Trainer, build_data
from mamlpp.meta import anneal_loss_weights

# %%
config = preset("synthetic-ci").with_changes(
    dataset={"n_classes": 120, "split_counts": [80, 20, 20], "n_eval_tasks": 100},
    meta={"da_switch_epoch": 1, "msl_epochs": 3},
    run={"epochs": 4, "iterations_per_epoch": 40, "seeds": [0]},
)
data = build_data(config, with_test=False)
pool = data.pool
print(f"{pool.n_classes} classes of {pool.instances_per_class} images at {pool.image_shape}")
print("split (train, val, test):", data.split.counts())

# %% [markdown]
# ## One episode

# %%
ep = data.val_tasks[0]
print("support", ep.support_x.shape, "labels", ep.support_y)
print("target ", ep.target_x.shape, "per class", np.bincount(ep.target_y))

# %% [markdown]
# ## Training
#
# Epoch 0 runs first-order; from epoch 1 the meta-gradient includes the
# second-order terms.  Each line is one epoch: mean training loss (summed
# over the task batch), the derivative order in use and validation accuracy
# on the fixed task set.

# %%
trainer = Trainer(config, seed=0, data=data, out_dir=None)
before = evaluate(trainer.learner, trainer.state, data.val_tasks)
print(f"before training: {before}")
for epoch in range(config.run.epochs):
    trainer.epoch = epoch
    losses, orders, ms = [], set(), []
    for _ in range(config.run.iterations_per_epoch):
        m = trainer.step()
        losses.append(m["loss"])
        orders.add(m["order"])
        ms.append(m["wall_ms"])
    val = trainer.validate()
    print(f"epoch {epoch}: loss {np.mean(losses):.3f}  order {'/'.join(sorted(orders))}"
          f"  {np.mean(ms):.0f} ms/iter  val {val}")

# %% [markdown]
# ## Learned inner-loop rates
#
# Every layer group owns one rate per inner step, all starting at 0.1.

# %%
for group, rates in trainer.state.lr_table().items():
    print(f"{group:>8}", " ".join(f"{r:.4f}" for r in rates))

# %% [markdown]
# ## Multi-step loss weights
#
# Uniform at the start, shifting toward the last step by the end of the
# annealing horizon.  Non-final steps keep a small floor.

# %%
for epoch in (0, 1, 2, 3):
    w = anneal_loss_weights(epoch, config.meta.inner_steps, config.meta.msl_epochs, config.meta.msl_floor)
    print(epoch, np.round(w, 4))

# %% [markdown]
# ## Per-step batch-norm statistics
#
# Slot `i` belongs to the forward passes under the step-`i` weights.  Slot 0
# only sees support forwards (before any update) and the last slot only
# target forwards (after the final update); the slots in between see both,
# hence twice the update count.  Each slot settles on its own moments.

# %%
bn = trainer.state.bn
layer = next(iter(bn.mean))
print("updates per slot:", np.asarray(bn.count[layer]).tolist())
print("mean of running mean per slot:", np.round(bn.mean[layer].mean(axis=-1), 4))
