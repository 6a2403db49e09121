import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_grads
from fusiontransnet import tensor as T
from fusiontransnet.errors import ContractError, DimensionError, NumericError


def leaf(rng, *shape, low=-1.0, high=1.0):
    return T.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return T.Tensor(x, requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projection():
    out = T.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0], [7.0]])
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert check_grads(lambda: T.sum(T.matmul(a, b)), [a, b], tol=1e-5) < 1e-5


def test_matmul_gradient_rule_is_g_bt_and_at_g(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    g = rng.normal(size=(3, 2))
    T.backward(T.sum(T.hadamard(T.matmul(a, b), g)))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-13)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-13)


def test_matmul_batched_broadcast_gradient(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 2)
    check_grads(lambda: T.sum(T.square(T.matmul(a, b))), [a, b])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows([[0.0, 0.0, 0.0]]).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_closed_form():
    e = math.e
    np.testing.assert_allclose(T.softmax_rows([[1.0, 0.0]]).data, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-14)


def test_softmax_limit_is_one_hot():
    out = T.softmax_rows([[-1e9, 0.0, -1e9]]).data
    np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-9)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax_rows([[0.0, np.nan]])


def test_softmax_mask_zeroes_entries_and_empty_rows():
    mask = np.array([[True, False, True], [False, False, False]])
    out = T.softmax(np.zeros((2, 3)), mask=mask).data
    np.testing.assert_allclose(out, [[0.5, 0, 0.5], [0, 0, 0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(x).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_gradient(rng):
    x = leaf(rng, 3, 5, low=-3, high=3)
    w = rng.normal(size=(3, 5))
    check_grads(lambda: T.sum(T.hadamard(T.softmax(x), w)), [x])


def test_masked_softmax_gradient(rng):
    x = leaf(rng, 2, 3, 4)
    mask = rng.random((3, 4)) > 0.4
    w = rng.normal(size=(2, 3, 4))
    check_grads(lambda: T.sum(T.hadamard(T.softmax(x, mask=mask), w)), [x])


# ---------------------------------------------------------------- elementwise

def test_relu_values():
    np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])


def test_sigmoid_zero():
    assert T.sigmoid(0.0).item() == 0.5


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid([-800.0, 800.0]).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_abs_gradient_is_sign():
    x = T.Tensor([-2.0, 3.0], requires_grad=True)
    T.backward(T.sum(T.abs(x)))
    np.testing.assert_array_equal(x.grad, [-1, 1])


def test_kink_subgradients_are_zero():
    x = T.Tensor([0.0], requires_grad=True)
    T.backward(T.relu(x))
    assert x.grad[0] == 0.0
    y = T.Tensor([0.0], requires_grad=True)
    T.backward(T.abs(y))
    assert y.grad[0] == 0.0


def test_leaky_relu_default_slope():
    np.testing.assert_allclose(T.leaky_relu([-2.0, 3.0]).data, [-0.02, 3.0])


@pytest.mark.parametrize("op", [T.relu, T.abs, lambda x: T.leaky_relu(x, 0.2)])
def test_kinked_ops_gradient(rng, op):
    x = away_from_zero(rng, 4, 3)
    w = rng.normal(size=(4, 3))
    check_grads(lambda: T.sum(T.hadamard(op(x), w)), [x])


def test_sigmoid_gradient(rng):
    x = leaf(rng, 5, low=-4, high=4)
    check_grads(lambda: T.sum(T.square(T.sigmoid(x))), [x])


# ---------------------------------------------------------------- structure

def test_transpose_concat_slice_sum_gradients(rng):
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 4)
    w = rng.normal(size=(6, 3))

    def build():
        joined = T.concat([a, b], axis=1)                  # (3, 6)
        part = T.slice(joined, 1, 1, 5)                     # (3, 4)
        return T.sum(T.hadamard(T.transpose(T.concat([part, a], axis=1)), w))

    check_grads(build, [a, b])


def test_concat_extent_mismatch():
    with pytest.raises(DimensionError):
        T.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_hadamard_shape_mismatch():
    with pytest.raises(DimensionError):
        T.hadamard(np.ones((2, 3)), np.ones((3, 2)))


def test_sum_axis_and_mean(rng):
    x = leaf(rng, 2, 3, 4)
    np.testing.assert_allclose(T.sum(x, axis=1).data, x.data.sum(axis=1))
    np.testing.assert_allclose(T.mean(x, axis=(1, 2)).data, x.data.mean(axis=(1, 2)))
    check_grads(lambda: T.sum(T.square(T.mean(x, axis=(0, 2)))), [x])


def test_reshape_and_stack_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    w = rng.normal(size=(3, 2, 2))
    check_grads(lambda: T.sum(T.hadamard(T.reshape(T.stack([a, b], axis=0), (3, 2, 2)), w)), [a, b])


@pytest.mark.parametrize("spec,shapes", [
    ("blnd,n->bld", [(2, 3, 4, 5), (4,)]),
    ("bld,dn->bln", [(2, 3, 5), (5, 4)]),
    ("bln,bkn->blk", [(2, 3, 4), (2, 3, 4)]),
    ("lk,bkj->blj", [(3, 3), (2, 3, 3)]),
    ("blk,bknd->blnd", [(2, 3, 3), (2, 3, 4, 5)]),
    ("ij->j", [(3, 4)]),
])
def test_einsum_matches_numpy_and_finite_differences(rng, spec, shapes):
    ops = [leaf(rng, *s) for s in shapes]
    np.testing.assert_allclose(T.einsum(spec, *ops).data, np.einsum(spec, *[o.data for o in ops]), rtol=1e-13)
    out_shape = T.einsum(spec, *ops).shape
    w = rng.normal(size=out_shape)
    check_grads(lambda: T.sum(T.hadamard(T.einsum(spec, *ops), w)), ops)


def test_weighted_abs_diff_matches_composed_graph(rng):
    w, own, cand = leaf(rng, 2, 3, 4, low=0, high=1), away_from_zero(rng, 2, 3, 5), leaf(rng, 2, 4, 5)
    brute = np.zeros((2, 3, 5))
    for b in range(2):
        for i in range(3):
            for j in range(4):
                brute[b, i] += w.data[b, i, j] * np.abs(own.data[b, i] - cand.data[b, j])
    np.testing.assert_allclose(T.weighted_abs_diff(w, own, cand).data, brute, rtol=1e-13)
    g = rng.normal(size=(2, 3, 5))
    check_grads(lambda: T.sum(T.hadamard(T.weighted_abs_diff(w, own, cand), g)), [w, own, cand])


# ---------------------------------------------------------------- backward contract

def test_backward_outer_structure(rng):
    w = leaf(rng, 3, 4)
    x = rng.normal(size=(4, 1))
    T.backward(T.sum(T.matmul(w, x)))
    np.testing.assert_allclose(w.grad, np.tile(x.T, (3, 1)), rtol=1e-15)
    check_grads(lambda: T.sum(T.matmul(w, x)), [w], tol=1e-5)


def test_backward_on_constant_is_noop():
    c = T.sum(T.Tensor([1.0, 2.0]))
    T.backward(c)
    assert c.grad is None


def test_backward_twice_doubles(rng):
    w = leaf(rng, 2, 2)
    loss = T.sum(T.square(w))
    T.backward(loss)
    first = w.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        T.backward(leaf(rng, 2, 2))


def test_tape_is_topological(rng):
    a, b = leaf(rng, 2), leaf(rng, 2)
    c = T.add(a, b)
    d = T.hadamard(c, a)
    e = T.sum(T.add(d, c))
    order = T.tape(e)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = T.hadamard(x, x)
    T.backward(T.sum(T.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data, rtol=1e-15)


def test_replay_determinism(rng):
    a = rng.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        t = T.Tensor(a, requires_grad=True)
        T.backward(T.sum(T.sigmoid(T.matmul(t, t))))
        outs.append(t.grad.copy())
    assert np.array_equal(outs[0], outs[1])
