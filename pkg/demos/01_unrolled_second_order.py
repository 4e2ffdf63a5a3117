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
# # Differentiating through an unrolled inner loop
#
# A meta-gradient has to flow through every inner update
# `theta_i = theta_{i-1} - alpha * dL_support/dtheta`.  The support gradient
# inside that update is itself a function of `theta`, so the outer gradient
# picks up a Hessian term.  Dropping it gives the first-order approximation.
#
# This walk-through uses a scalar model so every number can be checked by hand.

# %%
import numpy as np

from mamlpp.autodiff import ComputationRecord, Tensor, default_dtype, grad, stop_gradient

# %% [markdown]
# Support loss `(theta - 2)^2 / 2 * k`, target loss `(theta - 3)^2 / 2`.
# One inner step with rate `alpha`.

# %%
def meta_loss(theta, alpha, k, order):
    support = (theta - 2.0) * (theta - 2.0) * (0.5 * k)
    (g,) = grad(support, [theta], create_graph=(order == "second"))
    if order == "first":
        g = stop_gradient(g)
    adapted = theta - alpha * g
    return (adapted - 3.0) * (adapted - 3.0) * 0.5


with default_dtype(np.float64):
    theta0, alpha, k = 1.0, 0.25, 2.0
    for order in ("second", "first"):
        theta = Tensor(theta0, requires_grad=True)
        loss = meta_loss(theta, alpha, k, order)
        (mg,) = grad(loss, [theta])
        print(f"{order:>6}-order  loss {float(loss.data):.6f}  d/dtheta0 {float(mg.data):+.6f}")

# %% [markdown]
# By hand: `theta_1 = theta_0 - alpha * k * (theta_0 - 2) = 1.5`, so the
# target loss is `(1.5 - 3)^2 / 2 = 1.125`.  The exact derivative carries the
# factor `d theta_1 / d theta_0 = 1 - alpha * k = 0.5`:
# `(theta_1 - 3) * 0.5 = -0.75`.  First order treats that factor as 1 and
# reports `-1.5`.

# %%
theta1 = theta0 - alpha * k * (theta0 - 2.0)
print("hand oracle:", (theta1 - 3.0) ** 2 / 2, (theta1 - 3.0) * (1 - alpha * k), theta1 - 3.0)

# %% [markdown]
# Central differences agree with the second-order value.

# %%
def scalar_objective(t):
    t1 = t - alpha * k * (t - 2.0)
    return (t1 - 3.0) ** 2 / 2


h = 1e-5
print("finite difference:", (scalar_objective(theta0 + h) - scalar_objective(theta0 - h)) / (2 * h))

# %% [markdown]
# ## What the recorded backward pass adds
#
# A `ComputationRecord` logs every node built while it is open.  Nodes made
# by a backward pass that was itself recorded are tagged with depth 1; the
# first-order variant never produces any.

# %%
with default_dtype(np.float64):
    for order in ("second", "first"):
        theta = Tensor(theta0, requires_grad=True)
        with ComputationRecord() as rec:
            loss = meta_loss(theta, alpha, k, order)
            grad(loss, [theta])
        depths = [n.depth for n in rec.nodes]
        print(f"{order:>6}-order: {len(depths)} nodes, {sum(d > 0 for d in depths)} from a recorded backward,"
              f" higher order present: {rec.has_higher_order}")
