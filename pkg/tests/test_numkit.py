import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import numkit
from errors import InvalidInputError


def _low_rank(seed, rows, cols, rank):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


shapes = st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))


@settings(max_examples=60, deadline=None)
@given(shapes)
def test_pinv_satisfies_penrose_conditions(shape):
    rows, cols, seed = shape
    rank = 1 + seed % min(rows, cols)
    A = _low_rank(seed, rows, cols, rank)
    P = numkit.pinv(A)
    scale = 1 + np.abs(A).max() * np.abs(P).max()
    assert np.allclose(A @ P @ A, A, atol=1e-9 * scale)
    assert np.allclose(P @ A @ P, P, atol=1e-9 * scale * np.abs(P).max())
    assert np.allclose(A @ P, (A @ P).T, atol=1e-9 * scale)
    assert np.allclose(P @ A, (P @ A).T, atol=1e-9 * scale)


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_range_projector_is_symmetric_and_idempotent(shape):
    rows, cols, seed = shape
    A = _low_rank(seed, rows, cols, 1 + seed % min(rows, cols))
    P, basis = numkit.range_projector(A)
    assert np.allclose(P, P.T, atol=1e-12)
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(basis.T @ basis, np.eye(basis.shape[1]), atol=1e-12)


def test_svd_reports_numerical_rank():
    A = _low_rank(1, 7, 5, 3)
    f = numkit.svd(A)
    assert f.numerical_rank == 3
    assert f.range_basis.shape == (7, 3)
    assert f.corange_basis.shape == (5, 3)


def test_svd_external_scale_counts_small_residual_as_zero():
    tiny = 1e-14 * np.ones((3, 4))
    assert numkit.svd(tiny).numerical_rank == 1
    assert numkit.svd(tiny, scale=1.0).numerical_rank == 0


def test_svd_of_zero_matrix_has_rank_zero():
    assert numkit.svd(np.zeros((3, 2))).numerical_rank == 0


def test_rank_tolerance_from_environment(monkeypatch):
    monkeypatch.setenv("DDPC_RANK_TOL", "1e-3")
    assert numkit.default_rank_tol((4, 5)) == pytest.approx(5e-3)


def test_null_space_is_orthogonal_complement():
    A = _low_rank(2, 4, 7, 2)
    K = numkit.null_space(A)
    assert K.shape == (7, 5)
    assert np.allclose(A @ K, 0, atol=1e-10)
    assert np.allclose(K.T @ K, np.eye(5), atol=1e-12)


def test_as_matrix_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        numkit.as_matrix([[1.0, np.nan]])


def test_weighted_sqnorm():
    W = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([1.0, -2.0])
    assert numkit.weighted_sqnorm(x, W) == pytest.approx(x @ W @ x)


def test_weighted_sqnorm_rejects_asymmetric_weight():
    with pytest.raises(InvalidInputError):
        numkit.weighted_sqnorm([1.0, 1.0], [[1.0, 1.0], [0.0, 1.0]])


def test_min_eigenvalue():
    assert numkit.min_eigenvalue(np.diag([3.0, -1.0, 2.0])) == pytest.approx(-1.0)


def test_lq_decompose_reconstructs_data(rng):
    Z, U, Y = rng.standard_normal((4, 30)), rng.standard_normal((3, 30)), rng.standard_normal((3, 30))
    lq = numkit.lq_decompose(Z, U, Y)
    S = np.vstack([Z, U, Y])
    assert not lq.degenerate
    assert np.allclose(lq.L @ lq.Q, S, atol=1e-12)
    assert np.allclose(lq.Q @ lq.Q.T, np.eye(10), atol=1e-12)
    assert np.all(np.diag(lq.L) >= 0)
    assert np.allclose(np.triu(lq.L, 1), 0)
    assert lq.L33.shape == (3, 3) and lq.M1.shape == (7, 7)
    assert np.allclose(lq.block(2, 1), lq.L21)


def test_lq_decompose_flags_short_data(rng):
    lq = numkit.lq_decompose(rng.standard_normal((3, 5)), rng.standard_normal((2, 5)), rng.standard_normal((2, 5)))
    assert lq.degenerate
    assert lq.L.shape == (7, 7)
    assert np.allclose(lq.L @ lq.Q, np.vstack([lq.L[:, :5] @ lq.Q[:5]]), atol=1e-12)


def test_lq_decompose_requires_equal_columns(rng):
    with pytest.raises(InvalidInputError):
        numkit.lq_decompose(rng.standard_normal((2, 5)), rng.standard_normal((2, 6)), rng.standard_normal((2, 5)))
