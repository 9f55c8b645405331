import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from embdistill.errors import ContractError, DegenerateInputError, DimensionError
from embdistill.tensor import (
    BatchNormState, as_matrix, batchnorm_backward, batchnorm_forward, cosine_sim,
    linear_backward, linear_forward, pairwise_sq_dist, pairwise_sq_dist_grad, pearson_sim,
    squared_dist,
)
from helpers import numeric_grad, rel_error

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_squared_dist_hand_values():
    assert squared_dist([0, 0], [3, 4]) == pytest.approx(12.5)
    assert squared_dist([1.0], [1.0]) == 0.0


def test_similarity_hand_values():
    assert cosine_sim([1, 0], [0, 2]) == pytest.approx(0.0)
    assert cosine_sim([1, 1], [2, 2]) == pytest.approx(1.0)
    assert pearson_sim([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson_sim([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_degenerate_similarities_raise():
    with pytest.raises(DegenerateInputError):
        cosine_sim([0, 0], [1, 2])
    with pytest.raises(DegenerateInputError):
        pearson_sim([5, 5, 5], [1, 2, 3])


def test_length_mismatch_raises():
    with pytest.raises(DimensionError):
        squared_dist([1, 2], [1, 2, 3])
    with pytest.raises(DimensionError):
        cosine_sim([1, 2], [1])


def test_as_matrix_rejects_nonfinite_and_bad_rank():
    with pytest.raises(ValueError):
        as_matrix([[np.nan, 1.0]])
    with pytest.raises(DimensionError):
        as_matrix([1.0, 2.0])
    with pytest.raises(DimensionError):
        as_matrix(np.zeros((2, 3)), cols=4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))))
def test_distance_symmetry_and_identity(pair):
    a, b = pair
    assert squared_dist(a, b) == pytest.approx(squared_dist(b, a), rel=1e-12, abs=1e-12)
    assert squared_dist(a, a) == 0.0
    assert squared_dist(a, b) >= 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))))
def test_similarities_bounded(pair):
    a, b = pair
    for f in (cosine_sim, pearson_sim):
        try:
            s = f(a, b)
        except DegenerateInputError:
            continue
        assert -1.0 <= s <= 1.0


def test_pairwise_matches_scalar_definition(rng):
    A, B = rng.normal(size=(5, 7)), rng.normal(size=(4, 7))
    D = pairwise_sq_dist(A, B)
    for i in range(5):
        for j in range(4):
            assert D[i, j] == pytest.approx(squared_dist(A[i], B[j]), rel=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_pairwise_grad_fd(seed):
    rng = np.random.default_rng(seed)
    n, m, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 8)
    A, B, G = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(n, m))
    gA, gB = pairwise_sq_dist_grad(G, A, B)
    f = lambda: float(np.sum(G * pairwise_sq_dist(A, B)))
    assert rel_error(gA, numeric_grad(f, A)) < 1e-4
    assert rel_error(gB, numeric_grad(f, B)) < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_linear_grad_fd(seed):
    rng = np.random.default_rng(seed)
    n, d_in, d_out = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 7)
    X, W, b = rng.normal(size=(n, d_in)), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    use_bias = bool(seed % 2)
    G = rng.normal(size=(n, d_out))
    out, cache = linear_forward(W, b if use_bias else None, X)
    gW, gb, gX = linear_backward(G, cache)
    f = lambda: float(np.sum(G * linear_forward(W, b if use_bias else None, X)[0]))
    assert rel_error(gW, numeric_grad(f, W)) < 1e-4
    assert rel_error(gX, numeric_grad(f, X)) < 1e-4
    if use_bias:
        assert rel_error(gb, numeric_grad(f, b)) < 1e-4
    else:
        assert gb is None


def test_linear_contract_errors(rng):
    W = rng.normal(size=(3, 4))
    with pytest.raises(DimensionError):
        linear_forward(W, None, rng.normal(size=(2, 5)))
    with pytest.raises(DimensionError):
        linear_forward(W, np.zeros(2), rng.normal(size=(2, 4)))
    _, cache = linear_forward(W, None, rng.normal(size=(2, 4)))
    with pytest.raises(ContractError):
        linear_backward(np.zeros((2, 2)), cache)


@pytest.mark.parametrize("seed", range(100))
def test_batchnorm_grad_fd(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(3, 8), rng.integers(1, 6)
    training = seed % 4 != 0
    # every feature gets a batch spread of 0.5..3 so the 1e-3 step stays small
    # next to the standard deviation it perturbs
    X = rng.normal(size=(n, d))
    X = (X - X.mean(axis=0)) / X.std(axis=0) * rng.uniform(0.5, 3.0, size=d) + rng.normal(size=d)
    st_ = BatchNormState.create(d)
    st_.gamma[:] = rng.uniform(0.5, 2.0, size=d)
    st_.beta[:] = rng.normal(size=d)
    st_.running_mean[:] = rng.normal(size=d)
    st_.running_var[:] = rng.uniform(0.5, 2.0, size=d)
    st_.training = training
    G = rng.normal(size=(n, d))

    def f():
        s = st_.copy()
        return float(np.sum(G * batchnorm_forward(X, s)[0]))

    _, cache = batchnorm_forward(X, st_.copy())
    gg, gb, gX = batchnorm_backward(G, cache)
    assert rel_error(gX, numeric_grad(f, X)) < 1e-4
    assert rel_error(gg, numeric_grad(f, st_.gamma)) < 1e-4
    assert rel_error(gb, numeric_grad(f, st_.beta)) < 1e-4


def test_batchnorm_running_stats_update(rng):
    X = rng.normal(2.0, 3.0, size=(8, 3))
    s = BatchNormState.create(3)
    batchnorm_forward(X, s)
    np.testing.assert_allclose(s.running_mean, 0.1 * X.mean(axis=0))
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * X.var(axis=0, ddof=1))


def test_batchnorm_train_output_is_standardized(rng):
    X = rng.normal(5.0, 2.0, size=(64, 4))
    out, _ = batchnorm_forward(X, BatchNormState.create(4))
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-3)


def test_batchnorm_eval_leaves_state_alone(rng):
    s = BatchNormState.create(3)
    s.training = False
    before = s.copy()
    batchnorm_forward(rng.normal(size=(4, 3)), s)
    np.testing.assert_array_equal(s.running_mean, before.running_mean)
    np.testing.assert_array_equal(s.running_var, before.running_var)


def test_batchnorm_constant_column_backward_raises(rng):
    X = rng.normal(size=(5, 3))
    X[:, 1] = 4.0
    _, cache = batchnorm_forward(X, BatchNormState.create(3))
    with pytest.raises(DegenerateInputError, match=r"\[1\]"):
        batchnorm_backward(np.ones((5, 3)), cache)


def test_batchnorm_single_sample_train_raises():
    with pytest.raises(DegenerateInputError):
        batchnorm_forward(np.ones((1, 2)), BatchNormState.create(2))
