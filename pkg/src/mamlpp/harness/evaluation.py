"""Fixed-task-set evaluation and the top-3 validation ensemble."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SelectionError, StructuralError
from ..meta import MetaLearner, MetaState


@dataclass
class EvalResult:
    accuracy: float
    std_error: float
    loss: float
    task_accuracies: list = field(default_factory=list)

    def __str__(self):
        return f"{100 * self.accuracy:.2f} ± {100 * self.std_error:.2f}% over {len(self.task_accuracies)} tasks"


def _check_compatible(states):
    ref = states[0]
    for s in states[1:]:
        if s.theta0.shapes != ref.theta0.shapes or s.inner_lrs.shapes != ref.inner_lrs.shapes:
            raise StructuralError("ensemble members have different parameter structures")
        if s.bn.mode != ref.bn.mode or s.bn.max_steps != ref.bn.max_steps:
            raise StructuralError("ensemble members have different batch-norm layouts")


def evaluate(learner: MetaLearner, states, episodes, n_steps=None) -> EvalResult:
    """Mean target accuracy over ``episodes`` with its standard error.

    ``states`` is one :class:`MetaState` or a list of them; with several,
    each adapts independently and the per-target class probabilities are
    averaged before the argmax.
    """
    if isinstance(states, MetaState):
        states = [states]
    states = list(states)
    if not states:
        raise StructuralError("evaluate needs at least one meta state")
    episodes = list(episodes)
    if not episodes:
        raise StructuralError("evaluate needs at least one episode")
    _check_compatible(states)
    accs, losses = [], []
    for ep in episodes:
        probs = np.mean(
            [learner.predict_proba(s, ep.support_x, ep.support_y, ep.target_x, n_steps) for s in states],
            axis=0,
        )
        y = np.asarray(ep.target_y)
        accs.append(float(np.mean(np.argmax(probs, axis=1) == y)))
        picked = np.clip(probs[np.arange(len(y)), y], 1e-12, None)
        losses.append(float(-np.mean(np.log(picked))))
    accs = np.asarray(accs)
    stderr = float(np.std(accs, ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
    return EvalResult(float(accs.mean()), stderr, float(np.mean(losses)), accs.tolist())


def select_top3(val_accuracies):
    """Epochs of the three best validation accuracies, best first.

    ``val_accuracies`` is a sequence indexed by epoch or a list of
    ``(epoch, accuracy)`` pairs.  Ties go to the earlier epoch.
    """
    items = list(val_accuracies)
    if items and not isinstance(items[0], (tuple, list)):
        items = list(enumerate(items))
    items = [(int(e), float(a)) for e, a in items if a is not None and np.isfinite(a)]
    if len(items) < 3:
        raise SelectionError(f"need at least 3 evaluated epochs to pick an ensemble, have {len(items)}")
    ranked = sorted(items, key=lambda ea: (-ea[1], ea[0]))
    return [e for e, _ in ranked[:3]]


def test_with_ensemble(learner: MetaLearner, states, episodes, n_steps=None) -> EvalResult:
    """Probability-averaged ensemble of ``states`` (normally the top 3) on ``episodes``."""
    states = list(states)
    if len(states) < 1:
        raise StructuralError("ensemble needs at least one member")
    return evaluate(learner, states, episodes, n_steps)
