import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrc.errors import InvalidInputError, NumericalError
from lrc.matcore import (RngState, frobenius_norm, matmul, random_gaussian, random_orthonormal,
                         spectral_norm, svd)
from oracles import jacobi_eigvals, triple_loop_matmul


def test_matmul_identity_and_swap():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)
    out = matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
    assert np.array_equal(out, [[2, 1], [4, 3]])


def test_matmul_matches_triple_loop():
    rng = RngState(3)
    a, b = rng.normal((7, 5)), rng.normal((5, 3))
    assert np.max(np.abs(matmul(a, b) - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        matmul([[np.nan]], [[1.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_matmul_associative(m, k, l, n, seed):
    rng = RngState(seed)
    a, b, c = rng.normal((m, k)), rng.normal((k, l)), rng.normal((l, n))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * max(1.0, np.linalg.norm(left))


def test_svd_diagonal():
    f = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(f.S, [3, 2, 1])
    assert np.allclose(np.abs(f.U), np.eye(3))
    assert np.allclose(np.abs(f.V), np.eye(3))


def test_svd_identity():
    assert np.allclose(svd(np.eye(4)).S, 1.0)


def test_svd_random_6x4_residuals_and_eigen_oracle():
    a = RngState(1).normal((6, 4))
    f = svd(a)
    assert np.linalg.norm(f.U.T @ f.U - np.eye(4)) < 1e-10
    assert np.linalg.norm(f.V.T @ f.V - np.eye(4)) < 1e-10
    assert np.linalg.norm(f.reconstruct() - a) < 1e-8 * np.linalg.norm(a)
    eig = jacobi_eigvals(a.T @ a)
    assert np.allclose(f.S ** 2, eig, rtol=1e-10, atol=1e-12)


def test_svd_invariants_on_100_random_matrices():
    rng = RngState(42)
    for i in range(100):
        m, n = (int(x) for x in rng.integers(1, 33, 2))
        a = rng.normal((m, n))
        f = svd(a)
        k = min(m, n)
        assert f.U.shape == (m, k) and f.V.shape == (n, k) and f.S.shape == (k,)
        assert np.linalg.norm(f.U.T @ f.U - np.eye(k)) <= 1e-10 * k
        assert np.linalg.norm(f.V.T @ f.V - np.eye(k)) <= 1e-10 * k
        assert np.all(np.diff(f.S) <= 0) and np.all(f.S >= 0)
        assert np.linalg.norm(f.reconstruct() - a) <= 1e-8 * np.linalg.norm(a)


def test_svd_sign_convention():
    f = svd(RngState(5).normal((7, 5)))
    for j in range(f.U.shape[1]):
        col = f.U[:, j]
        first = col[np.flatnonzero(np.abs(col) > 0)[0]]
        assert first >= 0


def test_svd_rank_deficient_keeps_orthonormal_columns():
    rng = RngState(9)
    a = rng.normal((8, 2)) @ rng.normal((2, 6))
    f = svd(a)
    assert np.linalg.norm(f.U.T @ f.U - np.eye(6)) < 1e-10
    assert np.linalg.norm(f.V.T @ f.V - np.eye(6)) < 1e-10
    assert np.all(f.S[2:] < 1e-10)
    assert np.linalg.norm(f.reconstruct() - a) < 1e-8 * np.linalg.norm(a)


def test_svd_zero_matrix():
    f = svd(np.zeros((3, 2)))
    assert np.all(f.S == 0)
    assert np.allclose(f.U.T @ f.U, np.eye(2))


def test_svd_wide_matrix():
    a = RngState(2).normal((3, 7))
    f = svd(a)
    assert f.U.shape == (3, 3) and f.V.shape == (7, 3)
    assert np.linalg.norm(f.reconstruct() - a) < 1e-8 * np.linalg.norm(a)


def test_svd_nonconvergence_raises_with_residual():
    a = RngState(4).normal((20, 20))
    with pytest.raises(NumericalError) as exc:
        svd(a, max_sweeps=1)
    assert exc.value.residual > 1e-12


def test_svd_rejects_empty_and_nan():
    with pytest.raises(InvalidInputError):
        svd(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        svd([[1.0, np.inf]])


def test_norms():
    assert frobenius_norm(np.zeros((2, 3))) == 0.0
    assert spectral_norm(np.zeros((2, 3))) == 0.0
    d = np.diag([3.0, 4.0])
    assert frobenius_norm(d) == pytest.approx(5.0, abs=1e-15)
    assert spectral_norm(d) == pytest.approx(4.0, abs=1e-12)
    a = RngState(8).normal((9, 5))
    assert abs(spectral_norm(a) - svd(a).S[0]) < 1e-10
    assert abs(spectral_norm(a) - np.linalg.norm(a, 2)) < 1e-10


def test_rng_determinism_and_counter():
    a = random_gaussian(RngState(11), 4, 3)
    b = random_gaussian(RngState(11), 4, 3)
    assert np.array_equal(a, b)
    r = RngState(11)
    x1 = r.normal(3)
    x2 = r.normal(3)
    assert not np.array_equal(x1, x2)
    assert np.array_equal(RngState(11, 1).normal(3), x2)
    assert r.counter == 2


def test_rng_spawn_does_not_advance():
    r = RngState(5)
    c1 = r.spawn(1)
    assert r.counter == 0
    assert not np.array_equal(c1.normal(4), r.spawn(2).normal(4))
    assert np.array_equal(RngState(5).spawn(1).normal(4), r.spawn(1).normal(4))


def test_random_orthonormal():
    q = random_orthonormal(RngState(0), 8, 3)
    assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-10 * 3
    assert np.array_equal(q, random_orthonormal(RngState(0), 8, 3))
    with pytest.raises(InvalidInputError):
        random_orthonormal(RngState(0), 2, 3)


def test_random_gaussian_statistics():
    x = random_gaussian(RngState(123), 1000, 1)
    assert abs(x.mean()) < 0.15
    assert abs(x.var() - 1) < 0.15
