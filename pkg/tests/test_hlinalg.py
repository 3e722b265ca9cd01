import warnings

import numpy as np
import pytest

from fmmlu.hlinalg import (IllConditionedWarning, LUFactor, SingularPivot,
                           dense_norm_estimate, id_fixed_tolerance, lu_factor,
                           lu_solve, spectral_norm_estimate)
from fmmlu.kernels import green


def _resid(A, S, R, T):
    return np.linalg.norm(A[:, R] - A[:, S] @ T, 2)


def test_id_rank_one():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    v = rng.standard_normal(20) + 1j * rng.standard_normal(20)
    A = np.outer(u, v)
    S, R, T = id_fixed_tolerance(A, 1e-10)
    assert len(S) == 1
    assert _resid(A, S, R, T) <= 1e-13 * np.linalg.norm(A, 2)


def test_id_duplicate_columns():
    c = np.array([[1.0], [2.0], [3.0]])
    S, R, T = id_fixed_tolerance(np.hstack([c, c]), 1e-8)
    assert list(S) == [0] and list(R) == [1]
    assert np.allclose(T, [[1.0]])


def test_id_green_block_vs_svd():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (200, 3))
    y = rng.uniform(0, 1, (100, 3)) + np.array([2.0, 0, 0])
    A = green(0, x[:, None, :], y[None, :, :])
    S, R, T = id_fixed_tolerance(A, 1e-6)
    assert len(S) <= 60
    assert _resid(A, S, R, T) <= 1e-6 * np.linalg.svd(A, compute_uv=False)[0]


def test_id_partition_and_exact_rank():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((50, 7)) @ rng.standard_normal((7, 40))
    S, R, T = id_fixed_tolerance(A, 1e-9)
    assert np.array_equal(np.sort(np.concatenate([S, R])), np.arange(40))
    assert len(S) == 7
    assert _resid(A, S, R, T) <= 1e-13 * np.linalg.norm(A, 2)
    assert T.shape == (7, 33)


def test_id_zero_and_empty():
    S, R, T = id_fixed_tolerance(np.zeros((4, 3)), 1e-6)
    assert len(S) == 0 and len(R) == 3
    S, R, T = id_fixed_tolerance(np.zeros((4, 0)), 1e-6)
    assert len(S) == len(R) == 0
    with pytest.raises(ValueError):
        id_fixed_tolerance(np.eye(3), 0.0)


def test_id_deterministic():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((40, 30)) @ np.diag(0.5 ** np.arange(30))
    a = id_fixed_tolerance(A, 1e-5)
    b = id_fixed_tolerance(A.copy(), 1e-5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_lu_identity_and_permutation():
    f = lu_factor(np.eye(4))
    b = np.arange(4.0)
    assert np.array_equal(lu_solve(f, b), b)
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    f = LUFactor(P)
    assert np.allclose(f.solve(np.eye(2)), P)


def test_lu_random_residual_and_matvec():
    rng = np.random.default_rng(4)
    M = rng.standard_normal((500, 500)) + 1j * rng.standard_normal((500, 500))
    f = LUFactor(M)
    X = f.solve(np.eye(500))
    assert np.linalg.norm(M @ X - np.eye(500)) <= 1e-12 * np.linalg.norm(M)
    x = rng.standard_normal((500, 3)) + 0j
    assert np.allclose(f.matvec(x), M @ x, rtol=1e-12, atol=1e-10)
    assert np.allclose(f.matvec(x[:, 0], adjoint=True), M.conj().T @ x[:, 0],
                       rtol=1e-12, atol=1e-10)
    y = f.solve(x[:, 0], trans=2)
    assert np.allclose(M.conj().T @ y, x[:, 0], atol=1e-10)


def test_lu_singular_and_warning():
    with pytest.raises(SingularPivot):
        LUFactor(np.zeros((3, 3)))
    with pytest.raises(SingularPivot):
        LUFactor(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.warns(IllConditionedWarning):
        LUFactor(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-15]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        LUFactor(np.eye(3))
    with pytest.raises(ValueError):
        LUFactor(np.ones((2, 3)))


def test_norm_estimates():
    assert abs(dense_norm_estimate(np.eye(100)) - 1.0) <= 0.1
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal(40), rng.standard_normal(30)
    A = np.outer(u, v)
    assert abs(dense_norm_estimate(A) / (np.linalg.norm(u) * np.linalg.norm(v)) - 1) <= 0.1
    B = rng.standard_normal((300, 300))
    est = spectral_norm_estimate(lambda x: B @ x, lambda x: B.T @ x, 300, iters=20,
                                 rng=0, dtype=float)
    assert abs(est / np.linalg.svd(B, compute_uv=False)[0] - 1) <= 0.1
