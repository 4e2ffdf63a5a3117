import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import conv_loops
from mamlpp.autodiff import ParamSet, Tensor, batch_normalize, cross_entropy, gradients
from mamlpp.errors import NumericError, StructuralError
from mamlpp.network import (
    NetworkSpec,
    SlotStats,
    bn_param_names,
    build_network,
    forward,
    update_running_stats,
)

pytestmark = pytest.mark.usefixtures("f64")


def small_spec(**kw):
    base = dict(input_shape=(1, 8, 8), n_way=3, conv_layers=2, filters=3, max_steps=3)
    base.update(kw)
    return NetworkSpec(**base)


def test_default_conv_shapes():
    spec = NetworkSpec(input_shape=(1, 28, 28), n_way=5, filters=64)
    sizes, h = [], 28
    for _ in range(4):
        h = -(-h // 2)
        sizes.append((h, h))
    assert sizes == [(14, 14), (7, 7), (4, 4), (2, 2)]
    assert spec.feature_maps() == sizes
    params, bn = build_network(spec, np.random.default_rng(0))
    assert params["linear/weight"].shape == (64 * 2 * 2, 5)
    x = np.random.default_rng(1).uniform(size=(3, 1, 28, 28))
    assert forward(spec, params, bn, x).shape == (3, 5)


def test_per_step_allocates_n_plus_one_slots():
    spec = small_spec(max_steps=5)
    params, bn = build_network(spec, np.random.default_rng(0))
    for layer in spec.layer_names:
        assert sum(k.startswith(f"{layer}/bn/gamma/step") for k in params) == 6
        assert sum(k.startswith(f"{layer}/bn/beta/step") for k in params) == 6
        assert bn.mean[layer].shape == (6, 3)
        assert np.all(bn.var[layer] == 1.0) and np.all(bn.mean[layer] == 0.0)
        assert np.all(bn.count[layer] == 0)


def test_biases_only_mode_shares_gamma():
    spec = small_spec(bn_params="per_step_bias", max_steps=2)
    names = bn_param_names(spec, "conv1")
    assert names == ["conv1/bn/gamma", "conv1/bn/beta/step0", "conv1/bn/beta/step1", "conv1/bn/beta/step2"]


def test_equal_seeds_build_identical_networks():
    spec = small_spec()
    a, _ = build_network(spec, np.random.default_rng(3))
    b, _ = build_network(spec, np.random.default_rng(3))
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_collapsing_feature_map_rejected_at_build():
    with pytest.raises(StructuralError, match="collapses"):
        build_network(small_spec(input_shape=(1, 8, 8), conv_layers=3, padding=0),
                      np.random.default_rng(0))


def _numpy_forward(spec, p, x, bn_fn):
    """Reference conv -> BN -> ReLU stack in NCHW; features flattened as (H, W, C)."""
    h = x
    for layer in spec.layer_names:
        h = conv_loops(h, p[f"{layer}/weight"], spec.stride, spec.padding)
        h = h + p[f"{layer}/bias"].reshape(1, -1, 1, 1)
        h = bn_fn(layer, h)
        h = np.maximum(h, 0.0)
    flat = h.transpose(0, 2, 3, 1).reshape(len(h), -1)
    return flat @ p["linear/weight"] + p["linear/bias"]


def test_eval_mode_with_unit_stats_is_identity_bn():
    spec = small_spec()
    params, bn = build_network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(4, 1, 8, 8))
    got = forward(spec, params, bn, x, 0, "eval").data
    want = _numpy_forward(spec, params.numpy(), x, lambda layer, h: h / np.sqrt(1.0 + spec.bn_eps))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_shared_modes_match_conventional_bn_network():
    spec = small_spec(bn_mode="shared", bn_params="shared")
    params, bn = build_network(spec, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    p = params.numpy()
    running = {layer: [np.zeros(3), np.ones(3)] for layer in spec.layer_names}

    def train_bn(layer, h):
        mu = h.mean(axis=(0, 2, 3))
        var = h.var(axis=(0, 2, 3))
        running[layer][0] = 0.9 * running[layer][0] + 0.1 * mu
        running[layer][1] = 0.9 * running[layer][1] + 0.1 * var
        xhat = (h - mu.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + spec.bn_eps)
        return xhat * p[f"{layer}/bn/gamma"].reshape(1, -1, 1, 1) + p[f"{layer}/bn/beta"].reshape(1, -1, 1, 1)

    def eval_bn(layer, h):
        mu, var = running[layer]
        xhat = (h - mu.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + spec.bn_eps)
        return xhat * p[f"{layer}/bn/gamma"].reshape(1, -1, 1, 1) + p[f"{layer}/bn/beta"].reshape(1, -1, 1, 1)

    # every step index aliases the single statistics set
    for step in (0, 2, 1):
        x = rng.normal(size=(5, 1, 8, 8))
        got = forward(spec, params, bn, x, step, "train").data
        np.testing.assert_allclose(got, _numpy_forward(spec, p, x, train_bn), rtol=1e-10, atol=1e-12)
    for layer in spec.layer_names:
        np.testing.assert_allclose(bn.mean[layer][0], running[layer][0], rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(bn.var[layer][0], running[layer][1], rtol=1e-10)
    x = rng.normal(size=(2, 1, 8, 8))
    got = forward(spec, params, bn, x, 3, "eval").data
    np.testing.assert_allclose(got, _numpy_forward(spec, p, x, eval_bn), rtol=1e-10, atol=1e-12)


def test_step_index_selects_bn_parameters():
    spec = small_spec()
    params, bn = build_network(spec, np.random.default_rng(0))
    r = np.random.default_rng(5)
    params = params.updated(ParamSet(
        (k, Tensor(r.normal(size=params[k].shape))) for k in params if "/bn/" in k))
    x = r.normal(size=(4, 1, 8, 8))
    a = forward(spec, params, bn.copy(), x, 1).data
    b = forward(spec, params, bn.copy(), x, 2).data
    assert not np.allclose(a, b)


def test_train_forward_touches_only_its_slot():
    spec = small_spec()
    params, bn = build_network(spec, np.random.default_rng(0))
    forward(spec, params, bn, np.random.default_rng(1).normal(size=(4, 1, 8, 8)), 0)
    before = {k: v.copy() for k, v in bn.arrays().items()}
    forward(spec, params, bn, np.random.default_rng(2).normal(size=(4, 1, 8, 8)), 2)
    for layer in spec.layer_names:
        for stat in ("mean", "var", "count"):
            now, old = bn.arrays()[f"{layer}/{stat}"], before[f"{layer}/{stat}"]
            for slot in range(spec.n_slots):
                if slot == 2:
                    assert not np.array_equal(now[slot], old[slot])
                else:
                    assert np.array_equal(now[slot], old[slot])


def test_gradient_reaches_only_selected_slot():
    spec = small_spec()
    params, bn = build_network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 1, 8, 8))
    loss = cross_entropy(forward(spec, params, bn, x, 1), np.arange(6) % 3)
    grads = gradients(loss, params)
    for name, g in grads.items():
        if "/step" in name:
            nonzero = bool(np.any(g.data != 0))
            assert nonzero == name.endswith("/step1"), name


def test_batch_of_one_rejected_in_train_mode():
    spec = small_spec()
    params, bn = build_network(spec, np.random.default_rng(0))
    with pytest.raises(NumericError, match="at least 2"):
        forward(spec, params, bn, np.zeros((1, 1, 8, 8)), 0, "train")
    forward(spec, params, bn, np.zeros((1, 1, 8, 8)), 0, "eval")


def test_step_index_beyond_slots_rejected():
    spec = small_spec(max_steps=2)
    params, bn = build_network(spec, np.random.default_rng(0))
    with pytest.raises(StructuralError, match="slot"):
        forward(spec, params, bn, np.zeros((2, 1, 8, 8)), 3)


def test_batch_mode_never_accumulates():
    spec = small_spec(bn_mode="batch", bn_params="shared")
    params, bn = build_network(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 1, 8, 8))
    a = forward(spec, params, bn, x, 0, "train").data
    b = forward(spec, params, bn, x, 0, "eval").data
    np.testing.assert_array_equal(a, b)
    assert all(np.all(c == 0) for c in bn.count.values())


def test_mlp_network_forward():
    spec = NetworkSpec(input_shape=(2,), n_way=2, kind="mlp", hidden=(4,), max_steps=2)
    params, bn = build_network(spec, np.random.default_rng(0))
    assert [k for k in params if not k.startswith("fc1/bn")] == [
        "fc1/weight", "fc1/bias", "linear/weight", "linear/bias"]
    assert forward(spec, params, bn, np.ones((3, 2))).shape == (3, 2)


# running statistics -------------------------------------------------------

def _stats(mean, var=1.0):
    return SlotStats(np.array([mean], dtype=np.float64), np.array([var]), 0)


def test_ema_arithmetic():
    new = update_running_stats(_stats(0.0), [10.0], [1.0], 0.1)
    assert new.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert new.count == 1


def test_momentum_one_copies_batch():
    new = update_running_stats(_stats(3.0, 2.0), [-4.0], [0.5], 1.0)
    assert new.mean[0] == -4.0 and new.var[0] == 0.5


def test_momentum_outside_range_rejected():
    with pytest.raises(ValueError):
        update_running_stats(_stats(0.0), [1.0], [1.0], 0.0)


@given(seed=st.integers(0, 2**31), channels=st.integers(1, 4), axis=st.sampled_from([1, 3]))
def test_train_mode_normalization_moments(seed, channels, axis):
    r = np.random.default_rng(seed)
    shape = [6, 3, 3, 3]
    shape[axis] = channels
    x = r.normal(3.0, 2.0, size=shape)
    xhat = batch_normalize(Tensor(x), 1e-5, axis)[0].data
    axes = tuple(a for a in range(4) if a != axis)
    np.testing.assert_allclose(xhat.mean(axis=axes), 0.0, atol=1e-4)
    np.testing.assert_allclose(xhat.var(axis=axes), 1.0, atol=1e-4)


@given(seed=st.integers(0, 2**31), m=st.floats(0.01, 1.0))
def test_running_variance_stays_non_negative(seed, m):
    r = np.random.default_rng(seed)
    s = SlotStats(np.zeros(3), np.ones(3), 0)
    for _ in range(20):
        s = update_running_stats(s, r.normal(size=3), r.exponential(size=3), m)
        assert np.all(s.var >= 0)
