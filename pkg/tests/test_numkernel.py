import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from earn.errors import ConfigError, ContractError
from earn.numkernel import FlopCounter, matmul, rmsnorm, rope_apply, silu, silu_grad, softmax_rows, topk

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_matmul_identity_and_hand_case():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_counts_flops():
    c = FlopCounter()
    matmul(np.ones((4, 8)), np.ones((8, 8)), c)
    assert c.total == 512
    c.reset()
    assert c.total == 0


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_cases():
    assert np.allclose(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])
    p = softmax_rows(np.array([[0.3, 7.0]]), np.array([[True, False]]))
    assert p.tolist() == [[1.0, 0.0]]
    assert np.allclose(softmax_rows(np.log(np.array([[1.0, 3.0]]))), [[0.25, 0.75]])


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ContractError):
        softmax_rows(np.zeros((2, 2)), np.array([[True, False], [False, False]]))


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_shift_invariant(m):
    p = softmax_rows(m)
    assert np.allclose(p.sum(-1), 1.0)
    assert np.allclose(softmax_rows(m + 7.5), p)


def test_rmsnorm_cases():
    assert np.allclose(rmsnorm(np.ones(4), np.ones(4), eps=0), 1.0)
    assert np.allclose(rmsnorm(np.array([3.0, -3.0]), np.ones(2), eps=0), [1.0, -1.0])
    assert np.all(rmsnorm(np.arange(1.0, 5.0), np.zeros(4)) == 0)


def test_rope_zero_position_and_pair_rotation():
    x = np.random.default_rng(0).normal(size=(1, 8))
    assert np.array_equal(rope_apply(x, [0]), x)
    y = rope_apply(np.array([[1.0, 0.0]]), [3], base=10000.0)
    assert np.allclose(y, [[math.cos(3.0), math.sin(3.0)]])


@given(arrays(np.float64, (1, 16), elements=finite), st.integers(0, 5000))
def test_rope_preserves_norm_and_inverts(x, pos):
    y = rope_apply(x, [pos])
    assert np.isclose(np.linalg.norm(y), np.linalg.norm(x), rtol=1e-9, atol=1e-9)
    assert np.allclose(rope_apply(y, [pos], inverse=True), x, atol=1e-9)


def test_rope_relative_dot_products():
    # rotated dot product depends only on the position offset
    rng = np.random.default_rng(1)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    a = rope_apply(q, [10]) @ rope_apply(k, [7]).T
    b = rope_apply(q, [103]) @ rope_apply(k, [100]).T
    assert np.allclose(a, b)


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        rope_apply(np.ones((1, 3)), [0])


def test_silu_grad_matches_central_difference():
    x = np.linspace(-6, 6, 41)
    h = 1e-6
    assert np.allclose(silu_grad(x), (silu(x + h) - silu(x - h)) / (2 * h), atol=1e-8)


def test_topk_cases():
    assert topk(np.array([1, 3, 2]), 2) == [(1, 3), (2, 2)]
    assert topk(np.array([5, 5, 5]), 2) == [(0, 5), (1, 5)]
    assert [i for i, _ in topk(np.array([0.1, 0.9, 0.5]), 3)] == [1, 2, 0]
    with pytest.raises(ContractError):
        topk(np.array([1.0]), 2)


@settings(max_examples=50)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=20), st.data())
def test_topk_matches_sorted(values, data):
    k = data.draw(st.integers(1, len(values)))
    expect = sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]
    assert [i for i, _ in topk(np.array(values), k)] == expect
