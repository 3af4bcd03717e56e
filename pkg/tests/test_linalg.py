import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprog.linalg import (
    DimensionError,
    InputError,
    RankError,
    compact_svd,
    gaussian_matrix,
    principal_angles,
    qr_orthonormal,
    random_orthogonal,
    range_basis,
)


def test_gaussian_matrix_is_deterministic():
    a = gaussian_matrix(2, 3, 7)
    assert a.shape == (2, 3)
    np.testing.assert_array_equal(a, gaussian_matrix(2, 3, 7))


def test_gaussian_matrix_moments():
    a = gaussian_matrix(1000, 1000, 1)
    assert abs(a.mean()) <= 0.01
    assert abs(a.var() - 1.0) <= 0.02


@pytest.mark.parametrize("shape", [(0, 3), (3, 0), (-1, 2)])
def test_gaussian_matrix_rejects_empty(shape):
    with pytest.raises(DimensionError):
        gaussian_matrix(*shape, seed=1)


def test_qr_identity():
    q = qr_orthonormal(np.eye(3))
    np.testing.assert_allclose(np.abs(q), np.eye(3), atol=1e-15)


def test_qr_orthogonal_columns():
    a = np.array([[3.0, 0], [0, 4], [0, 0]])
    q = qr_orthonormal(a)
    np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(q @ q.T @ a, a, atol=1e-12)


def test_qr_projector_identity_on_random_input():
    a = gaussian_matrix(6, 3, 11)
    q = qr_orthonormal(a)
    assert np.linalg.norm(q @ q.T @ a - a) / np.linalg.norm(a) <= 1e-10
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-10)


def test_qr_reports_rank():
    a = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankError) as info:
        qr_orthonormal(a)
    assert info.value.rank == 1


def test_range_basis_drops_null_directions():
    a = gaussian_matrix(8, 2, 0) @ gaussian_matrix(2, 5, 1)
    q = range_basis(a)
    assert q.shape == (8, 2)
    np.testing.assert_allclose(q @ q.T @ a, a, atol=1e-12)


def test_svd_diagonal():
    np.testing.assert_allclose(compact_svd(np.diag([3.0, 1.0])).sigma, [3.0, 1.0])


def test_svd_rank_one():
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0, 4.0])
    svd = compact_svd(np.outer(u, v))
    np.testing.assert_allclose(svd.sigma, [10.0, 0.0, 0.0], atol=1e-10)


def test_svd_matches_eigen_oracle():
    a = gaussian_matrix(4, 6, 5)
    svd = compact_svd(a)
    assert svd.k == 4
    assert np.linalg.norm(svd.reconstruct() - a) / np.linalg.norm(a) <= 1e-10
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1][:4]
    np.testing.assert_allclose(svd.sigma, np.sqrt(eig), rtol=1e-10)


def test_svd_sign_convention():
    svd = compact_svd(gaussian_matrix(7, 5, 3))
    idx = np.argmax(np.abs(svd.v), axis=0)
    assert np.all(svd.v[idx, np.arange(svd.k)] > 0)


def test_svd_rejects_nonfinite():
    with pytest.raises(InputError):
        compact_svd(np.array([[1.0, np.nan]]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_svd_invariants(n, m, seed):
    a = gaussian_matrix(n, m, seed)
    svd = compact_svd(a)
    k = min(n, m)
    assert np.linalg.norm(svd.reconstruct() - a) <= 1e-10 * np.linalg.norm(a)
    assert np.all(np.diff(svd.sigma) <= 0) and np.all(svd.sigma >= 0)
    np.testing.assert_allclose(svd.u.T @ svd.u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(svd.v.T @ svd.v, np.eye(k), atol=1e-10)


def test_random_orthogonal():
    p1 = random_orthogonal(1, 3)
    assert abs(abs(p1[0, 0]) - 1.0) < 1e-15
    a, b = random_orthogonal(5, 1), random_orthogonal(5, 2)
    for p in (a, b):
        assert np.linalg.norm(p.T @ p - np.eye(5)) <= 1e-12
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, random_orthogonal(5, 1))
    with pytest.raises(DimensionError):
        random_orthogonal(0, 1)


def test_principal_angles_resolve_small_rotations():
    a = np.eye(4)[:, :1]
    eps = 1e-9
    b = np.array([[np.cos(eps)], [np.sin(eps)], [0.0], [0.0]])
    np.testing.assert_allclose(principal_angles(a, b), [eps], rtol=1e-6)
