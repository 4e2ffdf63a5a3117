"""Independent oracles and small builders shared by the test modules."""

import numpy as np

from mamlpp.meta import MetaConfig, MetaLearner
from mamlpp.network import NetworkSpec


def rel_err(a, b, floor=1e-6):
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def conv_loops(x, w, stride, padding):
    """Direct NCHW x OIHW cross-correlation, one output element at a time."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * stride + di - padding
                                s = j * stride + dj - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[b, ch, r, s] * w[f, ch, di, dj]
                    out[b, f, i, j] = acc
    return out


def mlp_learner(n_steps=2, features=2, hidden=4, n_way=2, **meta):
    """MAML++ learner on a features -> hidden -> n_way MLP with per-step BN."""
    config = MetaConfig.mamlpp(inner_steps=n_steps, batch_size=2, **meta)
    spec = config.network_spec(NetworkSpec(input_shape=(features,), n_way=n_way, kind="mlp",
                                           hidden=(hidden,)))
    return MetaLearner(spec, config)


class Task:
    """Episode-shaped container for hand-built support/target arrays."""

    def __init__(self, support_x, support_y, target_x, target_y):
        self.support_x, self.support_y = support_x, np.asarray(support_y)
        self.target_x, self.target_y = target_x, np.asarray(target_y)


def gaussian_tasks(rng, n_tasks, n_support=10, n_target=10, features=2, n_way=2):
    tasks = []
    for _ in range(n_tasks):
        centres = rng.normal(0, 2, size=(n_way, features))
        def draw(n):
            y = np.arange(n) % n_way
            return centres[y] + rng.normal(0, 1, size=(n, features)), y
        sx, sy = draw(n_support)
        tx, ty = draw(n_target)
        tasks.append(Task(sx, sy, tx, ty))
    return tasks


def meta_objective(learner, state, tasks, order="second", weights=None):
    """Summed task objective as a function of the trainable parameters."""
    def f(trainables):
        st = state.with_trainables(trainables, state.adam)
        total = None
        for task in tasks:
            loss = learner.task_objective(st, task, order, weights)[0]
            total = loss if total is None else total + loss
        return total
    return f


def warm_bn(learner, state, tasks):
    """Give every step slot running statistics by one pass over ``tasks``."""
    for task in tasks:
        learner.task_objective(state, task, "first", None)
