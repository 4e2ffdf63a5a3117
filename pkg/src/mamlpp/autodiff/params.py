"""Named parameter collections and the reverse-mode driver."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from ..errors import StructuralError
from .tensor import Tensor, _backward_scope


class ParamSet(Mapping):
    """Ordered, uniquely-named collection of tensors.

    Order is insertion order and never changes, so the i-th gradient always
    lines up with the i-th parameter.
    """

    def __init__(self, entries=()):
        if isinstance(entries, Mapping):
            entries = entries.items()
        self._entries = {}
        for name, tensor in entries:
            if name in self._entries:
                raise StructuralError(f"duplicate parameter name '{name}'")
            if not isinstance(tensor, Tensor):
                tensor = Tensor(tensor)
            self._entries[name] = tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self):
        return [(k, tuple(v.shape)) for k, v in self._entries.items()]

    def compatible(self, other) -> bool:
        return self.shapes == other.shapes

    def require_compatible(self, other, what="parameter sets"):
        if not self.compatible(other):
            mine = dict(self.shapes)
            theirs = dict(other.shapes)
            diff = sorted(set(mine.items()) ^ set(theirs.items()))
            raise StructuralError(f"incompatible {what}: differing entries {diff[:6]}")

    def map(self, fn):
        return ParamSet((k, fn(v)) for k, v in self._entries.items())

    def subset(self, names):
        return ParamSet((k, self._entries[k]) for k in names)

    def updated(self, other):
        """Copy with entries of ``other`` replacing same-named entries."""
        merged = dict(self._entries)
        for k, v in other.items():
            if k not in merged:
                raise StructuralError(f"unknown parameter '{k}'")
            merged[k] = v
        return ParamSet(merged)

    def detach(self, requires_grad=False):
        return self.map(lambda t: Tensor(t.data, requires_grad=requires_grad))

    def copy(self, requires_grad=None):
        return self.map(
            lambda t: Tensor(
                t.data.copy(),
                requires_grad=t.requires_grad if requires_grad is None else requires_grad,
            )
        )

    def zeros_like(self):
        return self.map(lambda t: Tensor(np.zeros_like(t.data)))

    def numpy(self):
        return {k: v.data for k, v in self._entries.items()}

    def flat(self):
        return np.concatenate([v.data.ravel() for v in self._entries.values()]) if self else np.zeros(0)

    def from_flat(self, vector, requires_grad=False):
        out, pos = [], 0
        for k, v in self._entries.items():
            n = v.data.size
            out.append((k, Tensor(
                np.asarray(vector[pos : pos + n], dtype=v.dtype).reshape(v.shape),
                requires_grad=requires_grad,
            )))
            pos += n
        if pos != len(vector):
            raise StructuralError(f"flat vector has {len(vector)} entries, expected {pos}")
        return ParamSet(out)

    def astype(self, dtype, requires_grad=None):
        return self.map(
            lambda t: Tensor(
                t.data.astype(dtype),
                requires_grad=t.requires_grad if requires_grad is None else requires_grad,
            )
        )


def _relevant_nodes(loss, targets):
    """Nodes on some path from ``loss`` back to one of ``targets``.

    Returned in descending creation order, which is a reverse topological
    order because a node's inputs always exist before it.
    """
    memo = {}
    keep = []
    stack = [loss]
    while stack:
        t = stack[-1]
        key = id(t)
        if key in memo:
            stack.pop()
            continue
        pending = [p for p in t._parents if id(p) not in memo]
        if pending:
            stack.extend(pending)
            continue
        stack.pop()
        rel = key in targets or any(memo[id(p)] for p in t._parents)
        memo[key] = rel
        if rel:
            keep.append(t)
    keep.sort(key=lambda t: t._id, reverse=True)
    return keep, memo


def grad(loss: Tensor, wrt, create_graph=False):
    """Gradients of scalar ``loss`` w.r.t. each tensor in the list ``wrt``."""
    if loss.data.size != 1:
        raise StructuralError(f"gradients: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}
    nodes, memo = _relevant_nodes(loss, targets)
    found = {}
    with _backward_scope(create_graph):
        grads = {id(loss): Tensor(np.ones_like(loss.data))}
        for t in nodes:
            key = id(t)
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in targets:
                found[key] = g
            if not t._parents:
                continue
            needs = tuple(memo.get(id(p), False) for p in t._parents)
            if not any(needs):
                continue
            for p, gp, need in zip(t._parents, t._backward(t, g, needs), needs):
                if not need or gp is None:
                    continue
                pk = id(p)
                prev = grads.get(pk)
                grads[pk] = gp if prev is None else prev + gp
    out = []
    for t in wrt:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


def gradients(loss: Tensor, wrt: ParamSet, create_graph=False) -> ParamSet:
    """Return d(loss)/d(param) for every entry of ``wrt``, in the same order.

    With ``create_graph`` the backward pass is recorded, so the returned
    gradients can themselves be differentiated.  Entries the loss does not
    reach receive zeros.
    """
    names = list(wrt.keys())
    gs = grad(loss, [wrt[k] for k in names], create_graph=create_graph)
    return ParamSet(zip(names, gs))


def finite_difference_oracle(f, at: ParamSet, step=1e-5) -> ParamSet:
    """Central-difference gradient estimate of scalar ``f(ParamSet)``.

    Evaluated in 64-bit precision regardless of the dtype of ``at``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = at.astype(np.float64, requires_grad=False)
    x0 = base.flat()
    est = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(np.asarray(_value(f(base.from_flat(xp)))))
        fm = float(np.asarray(_value(f(base.from_flat(xm)))))
        est[i] = (fp - fm) / (2.0 * step)
    return base.from_flat(est)


def _value(x):
    return x.data if isinstance(x, Tensor) else x
