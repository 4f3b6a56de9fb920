import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fluxlab.linalg import SolverError, cg_solve, dense_saddle_solve, direct_solve, saddle_operator
from oracle import dense_least_norm


def test_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, info = cg_solve(sp.identity(5), b)
    np.testing.assert_allclose(x, b)
    assert info.iterations == 1 and info.converged


def test_tridiagonal_hand_solution():
    A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(4, 4))
    x, _ = cg_solve(A, np.ones(4))
    np.testing.assert_allclose(x, [2, 3, 3, 2])
    np.testing.assert_allclose(direct_solve(A, np.ones(4)), [2, 3, 3, 2])


def test_zero_rhs():
    x, info = cg_solve(sp.identity(3), np.zeros(3))
    assert info.iterations == 0 and not x.any()


def test_indefinite_matrix_rejected():
    with pytest.raises(SolverError):
        cg_solve(sp.diags([1.0, -1.0]), np.ones(2))


def test_iteration_limit_reports_residual():
    A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(200, 200))
    with pytest.raises(SolverError, match="relative residual"):
        cg_solve(A, np.ones(200), maxiter=3)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_cg_matches_dense_solve(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    A = G @ G.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, _ = cg_solve(A, b, tol=1e-13)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-8, atol=1e-10)


def test_zero_constraints_give_zero_flux():
    M = np.diag([1.0, 2.0, 3.0])
    B = np.array([[1.0, 1.0, 0.0]])
    np.testing.assert_array_equal(dense_saddle_solve(M, B, np.zeros(1)), 0.0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 12), seed=st.integers(0, 10_000))
def test_saddle_matches_least_norm_oracle(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    M = G @ G.T + np.eye(n)
    m = int(rng.integers(1, n))
    B = rng.standard_normal((m, n))
    B = np.vstack([B, B[0] + B[-1]])  # one redundant row
    g = B @ rng.standard_normal(n)
    x = dense_saddle_solve(M, B, g, expected_nullity=1)
    np.testing.assert_allclose(B @ x, g, atol=1e-9)
    np.testing.assert_allclose(x, dense_least_norm(M, B, g), rtol=1e-7, atol=1e-9)


def test_incompatible_data_rejected():
    M = np.eye(2)
    B = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(SolverError, match="incompatible"):
        dense_saddle_solve(M, B, np.array([1.0, 2.0]))


def test_unexpected_nullity():
    with pytest.raises(SolverError, match="nullity"):
        saddle_operator(np.eye(2), np.eye(2), expected_nullity=1)
