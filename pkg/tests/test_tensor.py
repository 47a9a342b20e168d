import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bnndl.errors import ConfigError
from bnndl.ops import batchnorm, BNState, conv2d, global_avg_pool, linear, maxpool2d, softmax_cross_entropy
from bnndl.tensor import (Tensor, abs_, add, make_node, mean, minimum, mul, relu_pos, set_default_dtype,
                          get_default_dtype, square, std_population, sum_, topological_order)

from helpers import check_gradients, direct_conv, weighted_sum


def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9


def test_conv_negative_weights():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(-np.ones((1, 1, 3, 3))))
    assert out.item() == -9


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), stride, pad).values
    np.testing.assert_allclose(got, direct_conv(x, w, stride, pad), atol=1e-12, rtol=0)


def test_conv_shape_mismatch_names_dims():
    with pytest.raises(ConfigError, match="2"):
        conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_gradient_small():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(2, 3, 3, 3))
    err = check_gradients(lambda x, w: weighted_sum(conv2d(x, w, 2, 1), r),
                          [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))])
    assert err <= 1e-5


def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(1)
    x = rng.normal(3, 5, size=(4, 3, 5, 5))
    st_ = BNState(3, eps=1e-5)
    out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, True).values
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    # variance is 1 up to the eps under the square root
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), atol=1e-10)


def test_batchnorm_identity_on_standardized_input():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    # the default eps=1e-5 shifts the scale by ~5e-6 relative; a smaller eps isolates the identity
    out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BNState(2, eps=1e-7), True).values
    np.testing.assert_allclose(out, x, atol=1e-6)
    out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BNState(2), True).values
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_batchnorm_moving_stats_update():
    rng = np.random.default_rng(3)
    x = rng.normal(2, 3, size=(10, 2, 3, 3))
    s = BNState(2, momentum=0.1)
    batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), s, True)
    np.testing.assert_allclose(s.mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(s.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-12)


def test_batchnorm_eval_requires_stats():
    with pytest.raises(ConfigError):
        batchnorm(Tensor(np.ones((2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BNState(2), False)
    s = BNState(2)
    s.set(np.zeros(2), np.ones(2))
    out = batchnorm(Tensor(np.ones((2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), s, False)
    np.testing.assert_allclose(out.values, 1 / math.sqrt(1 + 1e-5))


def test_cross_entropy_ln2():
    assert softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_std_population_example():
    assert std_population(Tensor(np.array([1.0, -1, 1, -1]))).item() == 1.0


@pytest.mark.parametrize("fn", [sum_, mean, std_population])
def test_empty_reduction_raises(fn):
    with pytest.raises(ConfigError):
        fn(Tensor(np.zeros((3, 0))), axis=1)


def test_subgradient_conventions():
    z = Tensor(np.zeros(3), requires_grad=True)
    relu_pos(z).sum().backward()
    assert np.all(z.grad == 0)
    z = Tensor(np.zeros(3), requires_grad=True)
    abs_(z).sum().backward()
    assert np.all(z.grad == 0)
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    minimum(a, b).sum().backward()
    assert np.all(a.grad == 1) and np.all(b.grad == 0)


def test_backward_visits_each_node_once():
    calls = []
    x = Tensor(np.array(2.0), requires_grad=True)

    def tracked(t):
        def back(g):
            calls.append(1)
            return (g,)
        return make_node(t.values.copy(), (t,), back)

    y = tracked(x)
    z = add(mul(y, y), y)  # y has three consumers
    z.backward()
    assert len(calls) == 1
    assert x.grad == pytest.approx(2 * 2 + 1)
    order = topological_order(z)
    assert len(order) == len({id(n) for n in order})


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    x0, w0 = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    grads = []
    for _ in range(2):
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        s = BNState(4)
        y = batchnorm(conv2d(x, w, 1, 1), Tensor(np.ones(4)), Tensor(np.zeros(4)), s, True)
        square(maxpool2d(y)).sum().backward()
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(x0, a, b):
    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: square(x).sum()
    g = lambda x: (x * Tensor(np.arange(12.0).reshape(3, 4))).sum()
    combo = grad_of(lambda x: add(f(x) * a, g(x) * b))
    np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=1e-12, atol=1e-9)


def test_grad_finite_after_backward():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    loss = softmax_cross_entropy(linear(x, w), [0, 1, 2, 0])
    loss.backward()
    assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(w.grad))
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def test_global_avg_pool_values():
    x = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2)
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).values, x.mean(axis=(2, 3)))


def test_float32_reductions_accumulate_in_64_bit():
    x = np.full(10 ** 6, 0.1, dtype=np.float32)
    got = sum_(Tensor(x)).item()
    assert got == pytest.approx(float(np.float32(np.sum(x, dtype=np.float64))), rel=0)


def test_default_dtype_switch():
    old = get_default_dtype()
    try:
        set_default_dtype("float32")
        assert Tensor([1, 2]).dtype == np.float32
        with pytest.raises(ConfigError):
            set_default_dtype("int32")
    finally:
        set_default_dtype(old)
