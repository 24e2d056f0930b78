import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pourcam import wsloss
from pourcam.autograd import Value, numerical_grad, parameter
from oracles import neg_loss_reference, pos_loss_reference


def part_from(fg, bg):
    fg = np.asarray(fg, dtype=np.float64).reshape(-1, np.shape(fg)[-1] if len(fg) else 2)
    bg = np.asarray(bg, dtype=np.float64).reshape(-1, np.shape(bg)[-1] if len(bg) else 2)
    return wsloss.FeaturePartition(Value(fg), Value(bg), np.zeros((len(fg), 2), int), np.zeros((len(bg), 2), int))


@pytest.mark.parametrize("logit,label,expected", [(0.0, 1, math.log(2)), (math.log(3), 0, -math.log(0.25))])
def test_cls_loss_closed_form(logit, label, expected):
    assert float(wsloss.cls_loss(Value(np.array([logit])), np.array([label])).data) == pytest.approx(expected, abs=1e-6)


def test_cls_loss_saturates():
    assert float(wsloss.cls_loss(Value(np.array([50.0])), np.array([1])).data) < 1e-20


def test_partition_extremes():
    F4 = np.random.default_rng(0).normal(size=(3, 4, 5))
    p0 = wsloss.partition_features(F4, np.zeros((3, 4)))
    p1 = wsloss.partition_features(F4, np.ones((3, 4)), 0.7)
    assert (p0.m, p0.n) == (0, 12)
    assert (p1.m, p1.n) == (12, 0)


def test_partition_example():
    F4 = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    cam = np.array([[0.9, 0.5], [0.71, 0.69]])
    p = wsloss.partition_features(F4, cam, 0.7)
    assert p.fg_index.tolist() == [[0, 0], [1, 0]]
    assert p.bg_index.tolist() == [[0, 1], [1, 1]]
    assert np.array_equal(p.fg.data, F4[[0, 1], [0, 0]])


def test_partition_shape_mismatch():
    with pytest.raises(ValueError):
        wsloss.partition_features(np.zeros((3, 3, 2)), np.zeros((3, 4)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_partition_is_exhaustive_and_exclusive(cam):
    F4 = np.random.default_rng(0).normal(size=(4, 4, 3))
    p = wsloss.partition_features(F4, cam, 0.7)
    assert p.m + p.n == 16
    fg = {tuple(x) for x in p.fg_index}
    bg = {tuple(x) for x in p.bg_index}
    assert not fg & bg
    assert all(cam[i, j] >= 0.7 for i, j in fg) and all(cam[i, j] < 0.7 for i, j in bg)


@pytest.mark.parametrize("a,b,expected", [((1.0, 2.0), (1.0, 2.0), 1.0), ((1, 0), (0, 1), 0.0),
                                          ((1, 1), (1, 0), 1 / math.sqrt(2)), ((0, 0), (1, 0), 0.0)])
def test_cosine_examples(a, b, expected):
    assert wsloss.cosine_sim(a, b) == pytest.approx(expected, abs=1e-6)


def test_pos_loss_examples():
    assert float(wsloss.pos_loss(part_from([[1.0, 2.0]], [])).data) == 0.0
    assert float(wsloss.pos_loss(part_from([[1.0, 2.0], [2.0, 4.0]], [])).data) == pytest.approx(0.0, abs=1e-12)
    sixty = [[1.0, 0.0], [0.5, math.sqrt(3) / 2]]
    assert float(wsloss.pos_loss(part_from(sixty, [])).data) == pytest.approx(math.log(2) / 2, abs=1e-6)
    assert float(wsloss.pos_loss(part_from([], [[1.0, 0.0]])).data) == 0.0


def test_neg_loss_examples():
    assert float(wsloss.neg_loss(part_from([[1.0, 0.0]], [[0.0, 3.0]])).data) == 0.0
    assert float(wsloss.neg_loss(part_from([], [[1.0, 0.0]])).data) == 0.0
    one = part_from([[1.0, 0.0]], [[0.5, math.sqrt(3) / 2]])
    assert float(wsloss.neg_loss(one).data) == pytest.approx(math.log(2), abs=1e-6)


def test_identical_fg_bg_is_finite():
    p = part_from([[1.0, 1.0]], [[2.0, 2.0]])
    assert float(wsloss.neg_loss(p).data) == pytest.approx(-math.log(1e-6), rel=1e-9)


def test_total_loss_examples():
    assert float(wsloss.total_loss(0.0, Value(0.0), Value(0.0)).data) == 0.0
    assert float(wsloss.total_loss(0.7, Value(0.3), Value(0.0)).data) == pytest.approx(1.0)
    assert float(wsloss.total_loss(0.7, Value(0.3), Value(0.5), contrast=False).data) == pytest.approx(0.7)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-2, 2)), st.integers(1, 4))
def test_losses_match_pairwise_oracle(X, m):
    assume(np.all(np.linalg.norm(X, axis=1) > 1e-3))
    fg, bg = X[:m], X[m:]
    p = part_from(fg, bg)
    assert float(wsloss.pos_loss(p).data) == pytest.approx(pos_loss_reference(fg.tolist()), abs=1e-9)
    assert float(wsloss.neg_loss(p).data) == pytest.approx(neg_loss_reference(fg.tolist(), bg.tolist()), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-2, 2).filter(lambda v: abs(v) > 1e-3)),
       st.floats(0.1, 10.0), st.integers(0, 3))
def test_losses_are_scale_invariant_and_nonnegative(X, lam, row):
    fg, bg = X[:2], X[2:]
    base_p, base_n = float(wsloss.pos_loss(part_from(fg, bg)).data), float(wsloss.neg_loss(part_from(fg, bg)).data)
    Y = X.copy()
    Y[row] *= lam
    assert float(wsloss.pos_loss(part_from(Y[:2], Y[2:])).data) == pytest.approx(base_p, abs=1e-9)
    assert float(wsloss.neg_loss(part_from(Y[:2], Y[2:])).data) == pytest.approx(base_n, abs=1e-9)
    assert base_p >= 0 and base_n >= 0


def test_contrast_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    F4 = rng.normal(size=(3, 3, 4))
    cam = rng.random((3, 3))
    for fn in (wsloss.pos_loss, wsloss.neg_loss):
        P = parameter(F4.copy())
        fn(wsloss.partition_features(P, cam, 0.5)).backward()
        for idx in [(0, 0, 1), (1, 2, 3), (2, 1, 0), (0, 2, 2)]:
            num = numerical_grad(lambda: float(fn(wsloss.partition_features(F4, cam, 0.5)).data), F4, idx)
            assert abs(P.grad[idx] - num) <= 1e-6 * max(1.0, abs(num))
