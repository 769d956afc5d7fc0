import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distill_lab import tensor as T
from distill_lab.errors import BatchSizeError, DimensionError, NonFiniteError, RankError
from distill_lab.tensor import BatchNormState, Tensor, finite_diff_check

from gradcases import all_cases


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))


def test_matmul_small_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_random_5x7x3():
    rng = np.random.default_rng(3)
    a, b, w = rng.normal(size=(5, 7)), rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    fa = lambda t: T.tsum(T.mul(T.matmul(t, Tensor(b)), Tensor(w)))
    fb = lambda t: T.tsum(T.mul(T.matmul(Tensor(a), t), Tensor(w)))
    assert finite_diff_check(fa, a) < 1e-6
    assert finite_diff_check(fb, b) < 1e-6


# -- elementwise and reductions ----------------------------------------------

def test_mean_example():
    assert T.mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0


def test_sub_self_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(T.sub(x, x).data, np.zeros((3, 4)))


def test_mean_gradient_is_one_over_n():
    x = leaf(np.random.default_rng(1).normal(size=(4, 5)))
    T.mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full((4, 5), 1 / 20), rtol=0, atol=1e-15)


def test_leading_batch_broadcast_allowed():
    out = T.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]] * 3)


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_other_broadcasts_rejected(op):
    with pytest.raises(DimensionError):
        op(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 1))))


def test_operator_sugar():
    x = leaf([1.0, 2.0])
    y = (x * 3.0 + 1.0).sum()
    y.backward()
    assert y.item() == 11.0
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_sqrt_subgradient_zero_at_zero():
    x = leaf([0.0, 4.0])
    T.tsum(T.sqrt(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.25])


# -- relu --------------------------------------------------------------------

def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([-1.0, 0.0, 2.0])
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_all_negative():
    x = leaf(-np.arange(1.0, 6.0))
    out = T.relu(x)
    T.tsum(out).backward()
    assert not out.data.any()
    assert not x.grad.any()


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 6))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = rng.normal(size=(6, 6))
    assert finite_diff_check(lambda t: T.tsum(T.mul(T.relu(t), Tensor(w))), x) < 1e-6


def test_relu_masks_recorded():
    with T.record_relu_masks() as masks:
        T.relu(Tensor([-1.0, 2.0]))
    assert len(masks) == 1
    np.testing.assert_array_equal(masks[0], [False, True])


# -- softmax / log_softmax ---------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([[0.0] * 4])).data, [[0.25] * 4], atol=1e-15)


def test_softmax_reference_values():
    np.testing.assert_allclose(T.softmax(Tensor([[1.0, 2.0, 3.0]])).data,
                               [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)


def test_log_softmax_reference_values():
    np.testing.assert_allclose(T.log_softmax(Tensor([[1.0, 2.0, 3.0]])).data,
                               [[-2.40760596, -1.40760596, -0.40760596]], atol=1e-8)


def test_log_softmax_two_zeros():
    np.testing.assert_allclose(T.log_softmax(Tensor([[0.0, 0.0]])).data, [[-math.log(2)] * 2], atol=1e-15)


def test_softmax_stable_for_huge_logits():
    out = T.softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-15)


_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
               elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(_rows, st.floats(-100, 100, allow_nan=False))
def test_softmax_properties(x, c):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, p, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), p, rtol=0, atol=1e-12)


# -- batchnorm ---------------------------------------------------------------

def test_batchnorm_constant_column_gives_zero():
    st_ = BatchNormState.fresh(2)
    x = Tensor(np.column_stack([np.full(5, 3.0), np.arange(5.0)]))
    out = T.batchnorm1d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, training=True)
    np.testing.assert_array_equal(out.data[:, 0], 0.0)
    assert np.all(np.isfinite(out.data))


def test_batchnorm_eval_identity():
    st_ = BatchNormState.fresh(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = T.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)


def test_batchnorm_running_stats_update():
    st_ = BatchNormState.fresh(2, momentum=0.1)
    x = np.random.default_rng(2).normal(size=(6, 2)) + 3
    T.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, training=True)
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-14)


def test_batchnorm_single_row_train_mode_rejected():
    with pytest.raises(BatchSizeError):
        T.batchnorm1d(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                      BatchNormState.fresh(3), training=True)


def test_batchnorm_gradient_8x4():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    gamma, beta = rng.uniform(0.5, 1.5, 4), rng.normal(size=4)

    def f(t):
        return T.tsum(T.mul(T.batchnorm1d(t, Tensor(gamma), Tensor(beta), BatchNormState.fresh(4), True), Tensor(w)))

    assert finite_diff_check(f, x) < 1e-4


# -- backward semantics ------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.zeros((2, 3)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_zero_times_x():
    x = leaf([1.0, 2.0])
    T.tsum(T.scale(x, 0.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_nonscalar_rejected():
    with pytest.raises(RankError):
        T.scale(leaf([1.0, 2.0]), 2.0).backward()


def test_backward_twice_doubles_gradient():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)))
    loss = T.tsum(T.square(T.matmul(T.relu(x), w)))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = T.mul(x, x)
    z = T.add(y, y)
    order = T.topological_order(T.tsum(z))
    assert len(order) == len({id(n) for n in order})
    T.tsum(z).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_topological_order_inputs_first():
    x = leaf([1.0, 2.0])
    out = T.tsum(T.exp(T.scale(x, 2.0)))
    order = T.topological_order(out)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad


def test_debug_mode_flags_nan():
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            T.log(Tensor([-1.0]))
    finally:
        T.set_debug(False)


def test_float32_selectable():
    x = Tensor(np.ones(3), dtype=np.float32)
    assert T.scale(x, 2.0).data.dtype == np.float32


def test_determinism():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    r1 = T.log_softmax(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.log_softmax(T.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# -- finite-difference checker -----------------------------------------------

def test_checker_linear_is_exact():
    w = np.array([1.5, -2.0, 0.25])
    assert finite_diff_check(lambda t: T.tsum(T.mul(t, Tensor(w))), np.array([0.3, 0.1, -4.0])) < 1e-9


def test_checker_quadratic_gradient():
    x = leaf([1.0, 2.0])
    T.tsum(T.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    assert finite_diff_check(lambda t: T.tsum(T.square(t)), [1.0, 2.0]) < 1e-9


def test_checker_detects_a_wrong_gradient():
    def bad(t):
        out = T.tsum(T.square(t))
        real = out._backward
        out._backward = lambda g: tuple(2 * r for r in real(g))
        return out

    assert finite_diff_check(bad, np.array([1.0, -2.0])) > 0.4


@pytest.mark.parametrize("case", all_cases(repeats=1, seed=11), ids=lambda c: c[0])
def test_gradient_case(case):
    name, fn, point = case
    assert finite_diff_check(fn, point) < 1e-4, name
