"""Adam for the outer loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ParamSet, Tensor
from ..errors import StructuralError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_for(cls, params: ParamSet, beta1=0.9, beta2=0.99, eps=1e-8):
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0, beta1, beta2, eps,
        )

    def shapes(self):
        return [(k, a.shape) for k, a in self.m.items()]


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; the new parameters are fresh leaf
    tensors that require gradients.
    """
    params.require_compatible(grads, "parameters and gradients")
    if [(k, tuple(s)) for k, s in state.shapes()] != params.shapes:
        raise StructuralError("Adam state does not match the trainable parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], {}, {}
    for name, p in params.items():
        g = grads[name].data
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append((name, Tensor((p.data - step).astype(p.dtype), requires_grad=True)))
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return ParamSet(new_params), AdamState(new_m, new_v, t, b1, b2, state.eps)
