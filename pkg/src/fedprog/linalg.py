"""Dense linear-algebra kernels shared by the rest of the package.

Matrices are plain 2-D ``float64`` numpy arrays. Every random routine takes an
explicit seed; nothing here touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.linalg import subspace_angles

Seed = Union[int, Sequence[int], np.random.SeedSequence]


class DimensionError(ValueError):
    """A requested matrix dimension is zero or negative."""


class RankError(np.linalg.LinAlgError):
    """Input does not have the numerical column rank an operation requires."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class InputError(ValueError):
    """Input contains NaN or infinite entries."""


@dataclass(frozen=True)
class SvdTriplet:
    """Compact SVD ``a = u @ diag(sigma) @ v.T``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (1-D input becomes a column)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise InputError("matrix contains non-finite entries")
    return arr


def make_rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gaussian_matrix(rows: int, cols: int, seed: Seed) -> np.ndarray:
    """I.i.d. standard-normal ``rows x cols`` matrix, deterministic in ``seed``."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"gaussian_matrix needs rows, cols >= 1 (got {rows}x{cols})")
    return make_rng(seed).standard_normal((rows, cols))


def qr_orthonormal(a) -> np.ndarray:
    """Orthonormal basis ``Q`` (n x k) for the column span of ``a`` (n x k).

    Raises
    ------
    RankError
        If ``a`` is numerically rank deficient. The threshold is
        ``max(n, k) * eps * (largest column norm)`` applied to ``|R_ii|``.
    """
    a = as_matrix(a)
    n, k = a.shape
    if k > n:
        raise RankError(f"cannot orthonormalize {k} columns in dimension {n}", rank=n)
    q, r = np.linalg.qr(a, mode="reduced")
    col_norm = np.linalg.norm(a, axis=0).max() if a.size else 0.0
    tol = max(n, k) * np.finfo(np.float64).eps * col_norm
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol))
    if rank < k:
        raise RankError(f"input has numerical rank {rank} < {k} columns", rank=rank)
    # Make diag(R) positive so the basis is unique.
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs


def range_basis(a, rtol: float | None = None) -> np.ndarray:
    """Orthonormal basis for the numerical range of ``a``, dropping null directions.

    Unlike :func:`qr_orthonormal` this tolerates rank deficiency; the returned
    basis has ``rank(a)`` columns. Built from the left singular vectors.
    """
    a = as_matrix(a)
    n, k = a.shape
    if a.size == 0:
        return np.zeros((n, 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if rtol is None:
        rtol = max(n, k) * np.finfo(np.float64).eps
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    return u[:, :rank]


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each v column is made positive.
    if v.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def compact_svd(a) -> SvdTriplet:
    """Thin SVD with ``k = min(n, m)`` and a deterministic sign convention."""
    a = as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, v = _fix_signs(u, vt.T)
    return SvdTriplet(u=u, sigma=s, v=v)


def random_orthogonal(n: int, seed: Seed) -> np.ndarray:
    """Seeded ``n x n`` orthogonal matrix (QR of a Gaussian matrix)."""
    if n < 1:
        raise DimensionError("random_orthogonal needs n >= 1")
    return qr_orthonormal(gaussian_matrix(n, n, seed))


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spans of a and b."""
    return np.sort(subspace_angles(as_matrix(a), as_matrix(b)))


__all__ = [
    "DimensionError",
    "InputError",
    "RankError",
    "Seed",
    "SvdTriplet",
    "as_matrix",
    "compact_svd",
    "gaussian_matrix",
    "make_rng",
    "principal_angles",
    "qr_orthonormal",
    "random_orthogonal",
    "range_basis",
]
