import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtcnet import nn
from mtcnet.errors import ShapeError, TapeError
from mtcnet.tensor import (Tape, Tensor, add, backward, grad_check, mul, no_grad, relative_errors,
                           reshape, sub, tensor_sum)


def test_scalar_and_shapes():
    t = Tensor(3.0)
    assert t.shape == () and t.item() == 3.0
    assert Tensor(np.zeros((2, 3))).data.dtype == np.float64
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros(2)).item()


def test_sum_of_squares_gradient():
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, 8), requires_grad=True)
    report = grad_check(lambda t: tensor_sum(mul(t, t)), x, eps=1e-5, tol=1e-6)
    assert report.passed, str(report)


def test_product_rule_and_accumulation():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(5.0, requires_grad=True)
    backward(add(mul(a, b), a))
    assert a.grad == 6.0 and b.grad == 2.0
    # gradients accumulate across graphs until cleared
    backward(mul(a, 3.0))
    assert a.grad == 9.0


def test_shared_subexpression():
    x = Tensor(3.0, requires_grad=True)
    y = mul(x, x)
    backward(add(y, y))
    assert x.grad == pytest.approx(12.0)


def test_intermediate_grads_populated():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = mul(x, 2.0)
    backward(tensor_sum(y))
    np.testing.assert_array_equal(y.grad, [1.0, 1.0])


def test_backward_twice_raises():
    x = Tensor(1.5, requires_grad=True)
    loss = mul(x, x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_without_graph_or_nonscalar():
    with pytest.raises(TapeError):
        backward(Tensor(1.0))
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(mul(x, 2.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = tensor_sum(mul(x, x))
    assert y._node is None and not y.requires_grad
    assert Tape.of(y).nodes == []


def test_tape_order_inputs_first():
    x = Tensor(np.ones(2), requires_grad=True)
    y = tensor_sum(sub(mul(x, 2.0), 1.0))
    ops = [n.op for n in Tape.of(y).nodes]
    assert ops == ["mul", "sub", "sum"]


def test_broadcast_rules():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    backward(tensor_sum(mul(x, s)))
    assert s.grad == pytest.approx(4.0)
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_reshape_roundtrip_grad():
    x = Tensor(np.arange(6.0), requires_grad=True)
    y = reshape(x, (2, 3))
    backward(tensor_sum(mul(y, y)))
    np.testing.assert_allclose(x.grad, 2 * np.arange(6.0))
    with pytest.raises(ShapeError):
        reshape(x, (4, 2))


def test_relative_error_floor():
    err = relative_errors([1e-10, 1.0], [3e-10, 1.0001])
    assert err[0] == pytest.approx(2e-10)
    assert err[1] == pytest.approx(1e-4 / 1.0001)


def test_grad_check_detects_wrong_gradient():
    from mtcnet.tensor import forward_record

    def bad_square(t):
        # deliberately wrong backward: d(x^2)/dx reported as x
        return forward_record("bad", (t,), t.data ** 2, lambda g: (g * t.data,))

    x = Tensor(np.array([0.7, -1.3]), requires_grad=True)
    report = grad_check(lambda t: tensor_sum(bad_square(t)), x)
    assert not report.passed


def test_grad_check_kink_guard():
    x = Tensor(np.array([1e-7, 0.5, -0.5]), requires_grad=True)
    report = grad_check(lambda t: tensor_sum(nn.relu(t)), x, eps=1e-5, skip_kinks=True)
    assert report.passed
    assert report.kinked.tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-5, 5)),
    arrays(np.float64, n, elements=st.floats(-5, 5)))))
def test_bilinear_gradients(pair):
    a, b = pair
    x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    loss = tensor_sum(add(mul(x, y), mul(x, 3.0)))
    backward(loss)
    np.testing.assert_array_equal(x.grad, b + 3.0)
    np.testing.assert_array_equal(y.grad, a)
    assert np.isfinite(loss.item())
