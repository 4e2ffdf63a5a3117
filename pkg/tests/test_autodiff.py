import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import conv_loops, rel_err
from mamlpp.autodiff import (
    ComputationRecord,
    ParamSet,
    Tensor,
    add,
    add_bias,
    batch_normalize,
    batchnorm_apply,
    check_numerics,
    conv2d,
    cross_entropy,
    div,
    exp,
    finite_difference_oracle,
    grad,
    gradients,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    rsqrt,
    scale,
    softmax,
    stop_gradient,
    sub,
    tsum,
)
from mamlpp.autodiff.functional import _normalize_composite
from mamlpp.errors import NumericError, StructuralError

pytestmark = pytest.mark.usefixtures("f64")


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# forward primitives -------------------------------------------------------

def test_matmul_identity():
    a = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv_all_ones_kernel_matches_loops():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    # windows: {0,1,4,5}, {1,2,3,5,6,7}, {4,5,8,9,12,13}, rows 1-3 x cols 1-3
    expected = np.array([[[[10.0, 24.0], [51.0, 90.0]]]])
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(conv_loops(x, w, 2, 1), expected)


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7),
    w=st.integers(3, 7), k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2),
    seed=st.integers(0, 2**31),
)
def test_conv_matches_loops_for_random_shapes(n, c, o, h, w, k, stride, pad, seed):
    with_f64 = np.random.default_rng(seed)
    if (h + 2 * pad - k) // stride + 1 < 1 or (w + 2 * pad - k) // stride + 1 < 1:
        return
    x = with_f64.normal(size=(n, c, h, w))
    ker = with_f64.normal(size=(o, c, k, k))
    got = conv2d(Tensor(x), Tensor(ker), stride, pad).data
    np.testing.assert_allclose(got, conv_loops(x, ker, stride, pad), rtol=1e-12, atol=1e-12)
    nhwc = conv2d(Tensor(x.transpose(0, 2, 3, 1)), Tensor(ker), stride, pad, layout="NHWC").data
    np.testing.assert_allclose(nhwc.transpose(0, 3, 1, 2), got, rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch_names_operation():
    with pytest.raises(StructuralError, match="conv2d"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(StructuralError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_check_numerics_reports_offending_node():
    with check_numerics():
        with pytest.raises(NumericError, match="log") as info:
            with np.errstate(divide="ignore"):
                log(Tensor([0.0, 1.0]))
    assert info.value.details["kind"] == "log"
    with np.errstate(divide="ignore"):
        assert log(Tensor([0.0])).data[0] == -np.inf  # off by default


# cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 5))), [0, 2, 4])
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 4))
    logits[[0, 1], [1, 3]] = 1000.0
    assert cross_entropy(Tensor(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_scalar_hand_oracle():
    expected = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
    assert expected == pytest.approx(0.31326, abs=5e-6)
    assert cross_entropy(Tensor([[1.0, 2.0]]), [1]).item() == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(StructuralError, match="labels"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# gradients ----------------------------------------------------------------

def test_square_gradient():
    theta = leaf(3.0)
    (g,) = grad(mul(theta, theta), [theta])
    assert g.item() == 6.0


def test_second_derivative_of_cube():
    theta = leaf(2.0)
    (g,) = grad(mul(mul(theta, theta), theta), [theta], create_graph=True)
    assert g.item() == 12.0
    (h,) = grad(g, [theta])
    assert h.item() == 12.0


def test_unreached_parameter_gets_zero_gradient():
    params = ParamSet({"a": leaf([1.0, 2.0]), "b": leaf([[3.0]])})
    g = gradients(tsum(mul(params["a"], params["a"])), params)
    assert list(g) == ["a", "b"]
    assert g["b"].data.tolist() == [[0.0]]


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(StructuralError, match="scalar"):
        grad(mul(x, x), [x])


def test_stop_gradient_freezes_one_factor():
    theta = leaf(5.0)
    (g,) = grad(mul(stop_gradient(theta), theta), [theta])
    assert g.item() == 5.0


def test_stop_gradient_of_whole_expression():
    theta = leaf(5.0)
    (g,) = grad(stop_gradient(mul(theta, theta)), [theta])
    assert g.item() == 0.0


# finite-difference oracle -------------------------------------------------

def test_fd_sum_of_squares():
    est = finite_difference_oracle(lambda p: tsum(mul(p["x"], p["x"])), ParamSet({"x": [1.0, 2.0]}))
    np.testing.assert_allclose(est["x"].data, [2.0, 4.0], rtol=1e-8)


def test_fd_constant_function():
    est = finite_difference_oracle(lambda p: 3.0, ParamSet({"x": [1.0, 2.0, 3.0]}))
    assert est["x"].data.tolist() == [0.0, 0.0, 0.0]


def _mlp(rng):
    return ParamSet({
        "w1": leaf(rng.normal(size=(2, 4))), "b1": leaf(rng.normal(size=4)),
        "w2": leaf(rng.normal(size=(4, 2))), "b2": leaf(rng.normal(size=2)),
    })


def _mlp_loss(p, x, y):
    h = relu(add(matmul(Tensor(x), p["w1"]), p["b1"]))
    return cross_entropy(add(matmul(h, p["w2"]), p["b2"]), y)


def test_mlp_gradient_matches_finite_differences(rng):
    params = _mlp(rng)
    x, y = rng.normal(size=(8, 2)), rng.integers(0, 2, size=8)
    analytic = gradients(_mlp_loss(params, x, y), params)
    numeric = finite_difference_oracle(lambda p: _mlp_loss(p, x, y), params, step=1e-4)
    assert rel_err(analytic.flat(), numeric.flat()) < 1e-6


# every primitive against finite differences, first and second order --------

def _rand(rng, *shape):
    return rng.normal(size=shape)


UNARY = {
    "relu": (relu, lambda r: r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.3),
    "exp": (exp, lambda r: _rand(r, 3, 4)),
    "log": (log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "rsqrt": (rsqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "scale": (lambda a: scale(a, -1.7), lambda r: _rand(r, 3, 4)),
    "reshape": (lambda a: reshape(a, (4, 3)), lambda r: _rand(r, 3, 4)),
    "mean": (lambda a: mean(a, 0, keepdims=True), lambda r: _rand(r, 3, 4)),
    "sum": (lambda a: tsum(a, 1), lambda r: _rand(r, 3, 4)),
    "softmax": (lambda a: softmax(a, 1), lambda r: _rand(r, 3, 4)),
    "log_softmax": (lambda a: log_softmax(a, 1), lambda r: _rand(r, 3, 4)),
    "batch_normalize": (lambda a: batch_normalize(a, 1e-5, 1)[0], lambda r: _rand(r, 5, 3)),
    "batch_normalize_nhwc": (lambda a: batch_normalize(a, 1e-5, 3)[0], lambda r: _rand(r, 2, 3, 3, 2)),
}

BINARY = {
    "add": (add, (3, 4), (4,)),
    "sub": (sub, (3, 4), (3, 1)),
    "mul": (mul, (3, 4), (3, 4)),
    "div": (div, (3, 4), (1, 4)),
    "matmul": (matmul, (3, 4), (4, 2)),
    "add_bias": (lambda a, b: add_bias(a, b, 1), (2, 3, 2, 2), (3,)),
    "conv2d": (lambda a, b: conv2d(a, b, 2, 1), (2, 2, 5, 5), (3, 2, 3, 3)),
    "conv2d_nhwc": (lambda a, b: conv2d(a, b, 2, 1, "NHWC"), (2, 5, 5, 2), (3, 2, 3, 3)),
    "conv2d_stride1": (lambda a, b: conv2d(a, b, 1, 0), (1, 2, 4, 4), (2, 2, 2, 2)),
}


def _cases(rng):
    for name, (fn, make) in UNARY.items():
        yield name, (lambda xs, fn=fn: fn(xs[0])), [make(rng)]
    for name, (fn, sa, sb) in BINARY.items():
        b = rng.normal(size=sb)
        if name == "div":
            b = np.abs(b) + 0.5
        yield name, (lambda xs, fn=fn: fn(xs[0], xs[1])), [rng.normal(size=sa), b]
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    yield "batchnorm_apply", (lambda xs: batchnorm_apply(xs[0], xs[1], xs[2], 1)), [
        rng.normal(size=(4, 3, 2)), gamma, beta]


def _scalarize(out, weights):
    return tsum(mul(out, Tensor(weights)))


def _fd(f, arrays, step=1e-5):
    est = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            g[idx] = (f(plus) - f(minus)) / (2 * step)
        est.append(g)
    return est


CASE_NAMES = list(UNARY) + list(BINARY) + ["batchnorm_apply"]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_backward_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    _, fn, arrays = next(c for c in _cases(rng) if c[0] == name)
    weights = rng.normal(size=fn([Tensor(a) for a in arrays]).shape)

    def value(arrs):
        return float(_scalarize(fn([Tensor(a) for a in arrs]), weights).data)

    xs = [leaf(a) for a in arrays]
    analytic = grad(_scalarize(fn(xs), weights), xs)
    numeric = _fd(value, arrays)
    for a, n in zip(analytic, numeric):
        assert rel_err(a.data, n) < 1e-6


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_double_backward_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
    _, fn, arrays = next(c for c in _cases(rng) if c[0] == name)
    weights = rng.normal(size=fn([Tensor(a) for a in arrays]).shape)
    probes = [rng.normal(size=a.shape) for a in arrays]

    def first_grad_dot(xs, create_graph):
        gs = grad(_scalarize(fn(xs), weights), xs, create_graph=create_graph)
        total = None
        for g, p in zip(gs, probes):
            term = tsum(mul(g, Tensor(p)))
            total = term if total is None else add(total, term)
        return total

    def value(arrs):
        return float(first_grad_dot([leaf(a) for a in arrs], False).data)

    xs = [leaf(a) for a in arrays]
    h = first_grad_dot(xs, True)
    if not h.requires_grad:
        # linear in every input: the second derivative is identically zero
        numeric = _fd(value, arrays, step=1e-4)
        assert all(np.max(np.abs(n)) < 1e-6 for n in numeric)
        return
    analytic = grad(h, xs)
    numeric = _fd(value, arrays, step=1e-4)
    for a, n in zip(analytic, numeric):
        assert rel_err(a.data, n, floor=1e-4) < 1e-5


def test_fused_batch_normalize_equals_composite(rng):
    x_data = rng.normal(size=(6, 4, 3, 3))
    w = rng.normal(size=x_data.shape)
    grads = []
    for fused in (True, False):
        x = leaf(x_data)
        if fused:
            xhat = batch_normalize(x, 1e-5, 1)[0]
        else:
            xhat = _normalize_composite(x, (0, 2, 3), 1e-5)[0]
        (g,) = grad(tsum(mul(mul(xhat, xhat), Tensor(w))), [x], create_graph=True)
        (gg,) = grad(tsum(mul(g, g)), [x])
        grads.append((xhat.data, g.data, gg.data))
    for a, b in zip(*grads):
        assert rel_err(a, b) < 1e-9


# invariants ---------------------------------------------------------------

@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_gradients_are_linear(a, b, seed):
    r = np.random.default_rng(seed)
    params = _mlp(r)
    x, y = r.normal(size=(6, 2)), r.integers(0, 2, size=6)
    l1 = _mlp_loss(params, x, y)
    l2 = tsum(mul(params["w1"], params["w1"]))
    combined = gradients(add(scale(l1, a), scale(l2, b)), params).flat()
    separate = a * gradients(l1, params).flat() + b * gradients(l2, params).flat()
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12)


def test_replay_is_bit_deterministic():
    def run():
        r = np.random.default_rng(7)
        params = _mlp(r)
        x, y = r.normal(size=(8, 2)), r.integers(0, 2, size=8)
        return gradients(_mlp_loss(params, x, y), params, create_graph=True).flat()
    assert np.array_equal(run(), run())


def test_record_is_topological_and_tracks_depth(rng):
    params = _mlp(rng)
    x, y = rng.normal(size=(8, 2)), rng.integers(0, 2, size=8)
    with ComputationRecord() as plain:
        gradients(_mlp_loss(params, x, y), params)
    assert plain.is_topological() and plain.count() > 0
    assert not plain.has_higher_order
    with ComputationRecord() as second:
        gradients(_mlp_loss(params, x, y), params, create_graph=True)
    assert second.is_topological()
    assert second.has_higher_order and second.max_depth == 1
