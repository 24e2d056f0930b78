import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pourcam.autograd import Value, backward, bce_with_logits, concat, numerical_grad, parameter, sigmoid, where
from oracles import bce_reference


def check_grad(fn, x, tol=1e-6):
    """fn maps a Value to a scalar Value."""
    p = parameter(x.copy())
    loss = fn(p)
    loss.backward()
    for idx in np.ndindex(x.shape):
        num = numerical_grad(lambda: float(fn(Value(x)).data), x, idx)
        assert abs(p.grad[idx] - num) <= tol * max(1.0, abs(num)), (idx, p.grad[idx], num)


def test_sum_of_params_gives_unit_grads():
    p = parameter(np.arange(6.0).reshape(2, 3))
    p.sum().backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_squared_norm_grad_is_twice_p():
    p = parameter(np.array([1.5, -2.0, 0.25]))
    (p * p).sum().backward()
    assert np.allclose(p.grad, 2 * p.data)


@pytest.mark.parametrize("op", [
    lambda v: (v.exp() * 0.3).sum(),
    lambda v: (v * v + 1.0).log().sum(),
    lambda v: (v * v + 0.5).sqrt().sum(),
    lambda v: v.tanh().sum(),
    lambda v: (v.softmax(-1) * np.arange(4.0)).sum(),
    lambda v: (v.mean(axis=0, keepdims=True) * v).sum(),
    lambda v: (v.reshape(4, 3).transpose(1, 0) @ np.ones((4, 2))).sum(),
    lambda v: (1.0 / (v * v + 1.0)).sum(),
    lambda v: (v**3).mean(),
    lambda v: (v[np.array([0, 2, 2]), np.array([1, 1, 1])] * 2.0).sum(),
    lambda v: (v.clip(-0.5, 0.5) * v).sum(),
])
def test_ops_match_central_differences(op):
    x = np.random.default_rng(0).normal(size=(3, 4))
    check_grad(op, x)


def test_batched_matmul_grad():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(2, 3, 4))
    B = rng.normal(size=(4, 5))
    check_grad(lambda a: (a @ B).tanh().sum(), A)
    check_grad(lambda b: (A @ b).tanh().sum(), B)


def test_where_and_concat_route_gradients():
    x = np.array([[1.0, -2.0], [3.0, -4.0]])
    p = parameter(x)
    (where(x > 0, p * 2.0, p * 3.0).sum() + concat([p, p], axis=0).sum()).backward()
    assert np.array_equal(p.grad, np.array([[4.0, 5.0], [4.0, 5.0]]))


def test_relu_grad_is_indicator():
    p = parameter(np.array([-1.0, 0.5, 2.0]))
    p.relu().sum().backward()
    assert np.array_equal(p.grad, [0.0, 1.0, 1.0])


def test_non_scalar_loss_rejected():
    p = parameter(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(p * 2.0)


def test_non_finite_loss_rejected():
    p = parameter(np.array([0.0]))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        (p.log()).sum().backward()


def test_gradients_accumulate_over_shared_nodes():
    p = parameter(np.array(2.0))
    q = p * p
    (q + q).backward()
    assert p.grad == pytest.approx(8.0)


@pytest.mark.parametrize("logit,label", [(0.0, 1), (np.log(3), 0), (-4.0, 1), (7.5, 0)])
def test_bce_matches_reference(logit, label):
    v = bce_with_logits(Value(np.array([logit])), np.array([label])).sum()
    assert float(v.data) == pytest.approx(bce_reference(logit, label), rel=1e-12)


def test_bce_is_stable_for_huge_logits():
    v = bce_with_logits(Value(np.array([800.0, -800.0])), np.array([1.0, 0.0]))
    assert np.all(np.isfinite(v.data)) and np.all(v.data < 1e-20)


def test_bce_grad_is_sigmoid_minus_label():
    x = np.array([-1.2, 0.3, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    p = parameter(x)
    bce_with_logits(p, y).sum().backward()
    assert np.allclose(p.grad, sigmoid(x) - y)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_softmax_rows_sum_to_one(x):
    s = Value(x).softmax(-1).data
    assert np.allclose(s.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-2, 2)), arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_broadcast_add_grad_sums_out(b, x):
    pb = parameter(b)
    (Value(x) + pb).sum().backward()
    assert np.allclose(pb.grad, np.full(3, 2.0))
