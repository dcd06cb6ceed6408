import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from infnet import autodiff as ad
from infnet.autodiff import NumericError, ShapeError


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)


def test_logsumexp_and_softplus_closed_forms():
    assert ad.logsumexp(np.zeros(2)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert ad.softplus(np.array(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_sigmoid_derivative_at_zero():
    x = ad.parameter(0.0)
    ad.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_quadratic_gradient():
    x = ad.parameter([1.0, 2.0])
    (x @ x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_logsumexp_gradient_is_softmax():
    v = ad.parameter([1.0, 0.0])
    ad.logsumexp(v).backward()
    np.testing.assert_allclose(v.grad, ad.softmax(np.array([1.0, 0.0])).data, atol=1e-15)


def test_backward_on_non_scalar_raises():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        ad.add(np.ones(3), np.ones(4))


def test_no_grad_records_nothing():
    x = ad.parameter([1.0])
    with ad.no_grad():
        y = ad.tanh(x) * 3
    assert not y.requires_grad and y._backward is None


def test_grad_accumulates_over_shared_subgraph():
    x = ad.parameter(3.0)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_eval_is_pure():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    first = ad.softmax(ad.tanh(ad.matmul(a, b)), axis=-1).data
    second = ad.softmax(ad.tanh(ad.matmul(a, b)), axis=-1).data
    assert first.tobytes() == second.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_positive_and_normalized(v):
    p = ad.softmax(v).data
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-9


def test_finite_diff_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    x = ad.parameter(rng.normal(size=4))
    assert ad.finite_diff_check(lambda: x @ ad.matmul(A, x), [x], 1e-5) < 1e-6


def test_finite_diff_mlp_squared_loss():
    rng = np.random.default_rng(2)
    w1, b1 = ad.parameter(rng.normal(size=(3, 5))), ad.parameter(rng.normal(size=5))
    w2, b2 = ad.parameter(rng.normal(size=(5, 2))), ad.parameter(rng.normal(size=2))
    x, target = rng.normal(size=(4, 3)), rng.uniform(size=(4, 2))

    def loss():
        out = ad.sigmoid(ad.affine(ad.tanh(ad.affine(x, w1, b1)), w2, b2))
        return ad.tsum((out - target) ** 2)

    assert ad.finite_diff_check(loss, [w1, b1, w2, b2], 1e-5) < 1e-4


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_gradients(reverse):
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(2, 4, 3)))
    w_in = ad.parameter(rng.normal(size=(3, 8)) * 0.5)
    w_rec = ad.parameter(rng.normal(size=(2, 8)) * 0.5)
    bias = ad.parameter(rng.normal(size=8) * 0.1)
    weights = rng.normal(size=(2, 4, 2))
    err = ad.finite_diff_check(lambda: ad.tsum(ad.lstm(x, w_in, w_rec, bias, reverse=reverse) * weights), [x, w_in, w_rec, bias])
    assert err < 1e-6


def test_shape_ops_gradients():
    rng = np.random.default_rng(4)
    a = ad.parameter(rng.normal(size=(2, 3, 4)))
    b = ad.parameter(rng.normal(size=(2, 3, 2)))
    w = rng.normal(size=(2, 2, 6))

    def f():
        c = ad.concat([a[..., 1:3], b], axis=-1)
        s = ad.stack([c, ad.flip(c, axis=1)], axis=0)
        r = ad.reshape(ad.transpose(s, (1, 0, 2, 3)), (2, 2, 12))
        return ad.tsum(ad.log_softmax(r[:, :, :6], axis=-1) * w) + ad.tsum(ad.exp(ad.mean(b, axis=1)))

    assert ad.finite_diff_check(f, [a, b]) < 1e-6


def test_fancy_index_gradient_accumulates_duplicates():
    a = ad.parameter(np.arange(4.0))
    ad.tsum(a[np.array([0, 0, 2])]).backward()
    np.testing.assert_allclose(a.grad, [2, 0, 1, 0])


def test_finite_diff_epsilon_range_and_nonfinite():
    x = ad.parameter([1.0])
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda: ad.tsum(x), [x], 1e-2)
    with pytest.raises(NumericError):
        ad.finite_diff_check(lambda: ad.tsum(ad.log(x - 1.0)), [x], 1e-5)
