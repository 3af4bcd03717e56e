"""Federated randomized SVD for multivariate functional PCA.

Users hold row blocks ``S_i`` (``J_i x L``) of an uncentered signal matrix.
The protocol only ever uploads sketches of the data:

1. the server draws a Gaussian test matrix ``W`` (``L x m``, ``m = K + r``);
2. ``q`` power rounds: users upload ``S_i^T S_i W`` and the server sums them;
3. users upload ``Y_i = S_i W``; the server stacks ``Y``;
4. the server builds an orthonormal basis ``Q`` for ``[1, Y]`` and splits it
   into user blocks ``Q_i``;
5. a separate masking server issues an orthogonal ``P``;
6. users upload ``P Q_i^T S_i`` and the masked column sums ``P Q_i^T 1``;
7. the server removes the column mean from the aggregated projection and runs
   a small SVD; the right singular vectors are the principal directions.

The all-ones column in step 4 keeps the mean direction inside the basis, so
step 7 is an exact centering of ``Q Q^T S`` and the result does not depend on
the mask ``P``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .fedcore import (
    MASKING_SERVER,
    SERVER,
    AuditFailure,
    Federation,
    Message,
    Transcript,
    UserState,
    stack_aggregate,
    sum_aggregate,
)
from .linalg import (
    RankError,
    as_matrix,
    compact_svd,
    gaussian_matrix,
    qr_orthonormal,
    random_orthogonal,
    range_basis,
    _fix_signs,
)


class PrivacyError(AuditFailure):
    """Sketch width ``K + r`` is not below the signal length ``L``."""


class InsufficientDataError(ValueError):
    pass


class DegenerateSpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class FrsvdConfig:
    """Sketch parameters.

    ``k=None`` selects the component count adaptively: the sketch uses
    ``k_cap + r`` columns and ``K`` is the smallest count reaching
    ``fve_threshold`` of the computed spectrum (at most ``k_cap``).
    """

    k: Optional[int] = None
    r: int = 10
    q: int = 2
    k_cap: int = 10
    fve_threshold: float = 0.95

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.r < 0 or self.q < 0 or self.k_cap < 1:
            raise ValueError("need r >= 0, q >= 0, k_cap >= 1")
        if not 0 < self.fve_threshold <= 1:
            raise ValueError("fve_threshold must lie in (0, 1]")

    @property
    def k_target(self) -> int:
        return self.k if self.k is not None else self.k_cap

    @property
    def sketch_cols(self) -> int:
        return self.k_target + self.r

    def fit_to(self, n_rows: int, n_cols: int) -> "FrsvdConfig":
        """Shrink the sketch so it fits ``n_rows`` samples of length ``n_cols``.

        The basis needs ``sketch_cols + 1 <= n_rows`` and privacy needs
        ``sketch_cols < n_cols``. Oversampling is reduced first, then the target.
        """
        budget = max(1, min(n_rows - 1, n_cols - 1))
        if self.sketch_cols <= budget:
            return self
        k = self.k_target
        r = max(0, budget - k)
        k = min(k, budget - r)
        if self.k is None:
            return replace(self, k_cap=k, r=r)
        return replace(self, k=k, r=r)


@dataclass
class FrsvdOutput:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    q_basis: np.ndarray
    p_mask: np.ndarray
    sigma_all: np.ndarray
    col_mean: Optional[np.ndarray] = None  # known to the server only

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def to_csv(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        np.savetxt(os.path.join(directory, "v.csv"), self.v, delimiter=",")
        np.savetxt(os.path.join(directory, "sigma.csv"), self.sigma, delimiter=",")


# --- shared server-side steps --------------------------------------------

def _renormalize(w: np.ndarray) -> np.ndarray:
    # Same column span, but keeps weak directions above round-off when one
    # direction (typically the mean) dominates the power iterations.
    return np.linalg.qr(w)[0]


def _mean_augmented_basis(y: np.ndarray) -> np.ndarray:
    ones = np.full((y.shape[0], 1), 1.0 / np.sqrt(y.shape[0]))
    aug = np.hstack([ones, y])
    try:
        return qr_orthonormal(aug)
    except RankError:
        return range_basis(aug)


def _centered_small_svd(b_masked: np.ndarray, a_masked: np.ndarray, n_rows: int):
    # a^T B = 1^T S because the ones vector lies in the basis, so this is the
    # exact column mean of S
    mean_row = (a_masked @ b_masked) / n_rows
    centered = b_masked - np.outer(a_masked, mean_row)
    return compact_svd(centered), mean_row


def select_k_fve(sigma, threshold: float) -> int:
    """Smallest ``K`` whose leading squared singular values reach ``threshold``."""
    sigma = np.asarray(sigma, dtype=float)
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if sigma.ndim != 1 or sigma.size == 0 or np.any(sigma < 0):
        raise ValueError("sigma must be a nonempty vector of nonnegative values")
    energy = sigma ** 2
    total = energy.sum()
    if total <= 0:
        raise DegenerateSpectrumError("all singular values are zero")
    frac = np.cumsum(energy) / total
    return int(np.argmax(frac >= threshold * (1.0 - 1e-12)) + 1)


def _choose_k(cfg: FrsvdConfig, sigma_all: np.ndarray, available: int) -> int:
    if cfg.k is not None:
        if cfg.k > available:
            raise RankError(
                f"only {available} components available for k={cfg.k}; "
                "the sketch is rank deficient, try a larger oversampling r", rank=available)
        return cfg.k
    k = select_k_fve(sigma_all[:max(available, 1)], cfg.fve_threshold)
    return max(1, min(k, cfg.k_cap, available))


def _check_privacy(cfg: FrsvdConfig, n_cols: int, enforce: bool):
    if enforce and cfg.sketch_cols >= n_cols:
        raise PrivacyError(
            f"sketch width K + r = {cfg.sketch_cols} must be below signal length L = {n_cols}")


# --- federated protocol --------------------------------------------------

def federated_rsvd(users: Sequence[UserState], cfg: FrsvdConfig, seed_w, seed_p, *,
                   enforce_privacy: bool = True, keep_payloads: bool = True,
                   transcript: Optional[Transcript] = None) -> Tuple[FrsvdOutput, Transcript]:
    """Run the federated randomized SVD over ``users``; return output and transcript."""
    users = sorted(users, key=lambda u: u.user_id)
    if not users:
        raise InsufficientDataError("no participating users")
    lengths = {u.signals.shape[1] for u in users}
    if len(lengths) != 1:
        raise ValueError(f"users disagree on signal length: {sorted(lengths)}")
    n_cols = lengths.pop()
    sizes = {u.user_id: u.n_samples for u in users}
    n_rows = sum(sizes.values())
    _check_privacy(cfg, n_cols, enforce_privacy)
    m = cfg.sketch_cols

    transcript = transcript if transcript is not None else Transcript()
    transcript.meta.update({"L": n_cols, "J": dict(sizes), "sketch_cols": m})
    fed = Federation(users, transcript, keep_payloads=keep_payloads)

    w = gaussian_matrix(n_cols, m, seed_w)
    for _ in range(cfg.q):
        w = _renormalize(fed.run_round(w, lambda st, w_: st.signals.T @ (st.signals @ w_),
                                       sum_aggregate, down_label="W", up_label="W_i"))
    y = fed.run_round(w, lambda st, w_: st.signals @ w_, stack_aggregate,
                      down_label="W", up_label="Y_i")

    q_basis = _mean_augmented_basis(y)
    mb = q_basis.shape[1]
    transcript.meta["basis_cols"] = mb
    offsets = np.cumsum([0] + [sizes[u.user_id] for u in users])
    q_blocks = {u.user_id: q_basis[offsets[k]:offsets[k + 1]] for k, u in enumerate(users)}
    p_mask = random_orthogonal(mb, seed_p)

    def project(st, got):
        qi, p = got["Q_i"], got["P"]
        return {"B~_i": p @ (qi.T @ st.signals), "a~_i": p @ qi.sum(axis=0)}

    def aggregate(uploads):
        b = sum_aggregate([(uid, up["B~_i"]) for uid, up in uploads])
        a = sum_aggregate([(uid, up["a~_i"]) for uid, up in uploads])
        return b, a

    b_masked, a_masked = fed.run_round(
        {"Q_i": Message(per_user=q_blocks), "P": Message(p_mask, sender=MASKING_SERVER)},
        project, aggregate)

    small, col_mean = _centered_small_svd(b_masked, a_masked, n_rows)
    sigma_all = small.sigma
    k = _choose_k(cfg, sigma_all, mb - 1)
    u_hat, s_hat, v_hat = small.u[:, :k], sigma_all[:k], small.v[:, :k]
    transcript.meta["K"] = k
    fed.broadcast_only({"U^": Message(u_hat), "Sigma^": Message(s_hat), "V^": Message(v_hat)})

    u = q_basis @ (p_mask.T @ u_hat)
    out = FrsvdOutput(u=u, sigma=s_hat.copy(), v=v_hat.copy(), q_basis=q_basis,
                      p_mask=p_mask, sigma_all=sigma_all, col_mean=col_mean)
    return out, transcript


def centralized_rsvd(s, cfg: FrsvdConfig, seed_w, seed_p, *,
                     enforce_privacy: bool = True) -> FrsvdOutput:
    """The same pipeline on a pooled matrix, without a transcript."""
    s = as_matrix(s)
    n_rows, n_cols = s.shape
    _check_privacy(cfg, n_cols, enforce_privacy)
    w = gaussian_matrix(n_cols, cfg.sketch_cols, seed_w)
    for _ in range(cfg.q):
        w = _renormalize(s.T @ (s @ w))
    y = s @ w
    q_basis = _mean_augmented_basis(y)
    mb = q_basis.shape[1]
    p_mask = random_orthogonal(mb, seed_p)
    b_masked = p_mask @ (q_basis.T @ s)
    a_masked = p_mask @ q_basis.sum(axis=0)
    small, col_mean = _centered_small_svd(b_masked, a_masked, n_rows)
    k = _choose_k(cfg, small.sigma, mb - 1)
    u_hat = small.u[:, :k]
    return FrsvdOutput(u=q_basis @ (p_mask.T @ u_hat), sigma=small.sigma[:k].copy(),
                       v=small.v[:, :k].copy(), q_basis=q_basis, p_mask=p_mask,
                       sigma_all=small.sigma, col_mean=col_mean)


# --- centralized oracles -------------------------------------------------

def _require_rows(s: np.ndarray):
    if s.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 signals, got {s.shape[0]}")


def centralized_mfpca_svd(s) -> Tuple[np.ndarray, np.ndarray]:
    """Principal directions via SVD of the mean-centered matrix.

    Returns ``(eigvecs, eigvals)`` with ``eigvals = sigma**2``, the eigenvalues
    of the scatter matrix ``sum_j (s_j - mean)(s_j - mean)^T``.
    """
    s = as_matrix(s)
    _require_rows(s)
    svd = compact_svd(s - s.mean(axis=0))
    return svd.v, svd.sigma ** 2


def centralized_mfpca_eig(s) -> Tuple[np.ndarray, np.ndarray]:
    """Principal directions via eigendecomposition of the scatter matrix."""
    s = as_matrix(s)
    _require_rows(s)
    centered = s - s.mean(axis=0)
    scatter = centered.T @ centered
    vals, vecs = np.linalg.eigh(scatter)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    _, vecs = _fix_signs(np.zeros((1, vecs.shape[1])), vecs)
    return vecs, vals


def compute_scores(s_i, v) -> np.ndarray:
    """Uncentered MFPC-scores ``s_i @ v``."""
    s_i = np.atleast_2d(np.asarray(s_i, dtype=float))
    v = as_matrix(v)
    if s_i.shape[1] != v.shape[0]:
        raise ValueError(f"signal length {s_i.shape[1]} does not match basis rows {v.shape[0]}")
    return s_i @ v


# --- cost accounting -----------------------------------------------------

def comm_cost_formula(k: int, r: int, q: int, length: int, high_rank: bool = True) -> float:
    """Dominant per-user float count of the federated protocol."""
    if high_rank:
        return float(((2 * q + 3) * k + (2 * q + 1) * r) * length)
    return float((3 * k + r) * length)


def fsvd_cost_formula(length: int, n_samples: int) -> float:
    """Float count of the masked full-matrix federated SVD baseline."""
    return float(2 * length * (length + n_samples))


def exact_comm_cost(length: int, sizes: Sequence[int], sketch_cols: int, basis_cols: int,
                    k: int, q: int) -> dict:
    """Exact upload/download float counts of one :func:`federated_rsvd` run.

    Mirrors the transcript: ``W`` is downloaded ``q + 1`` times, ``W_i`` uploaded
    ``q`` times, then ``Y_i``, ``Q_i``, ``P``, ``B~_i``, ``a~_i`` and finally
    ``U^`` (``basis_cols x k``), ``Sigma^`` (``k``) and ``V^`` (``L x k``).
    """
    n_users = len(sizes)
    n_rows = int(sum(sizes))
    m, mb, L = sketch_cols, basis_cols, length
    upload = n_users * q * L * m + n_rows * m + n_users * (mb * L + mb)
    download = (n_users * (q + 1) * L * m + n_rows * mb + n_users * mb * mb
                + n_users * (mb * k + k + L * k))
    return {"upload": upload, "download": download, "total": upload + download}
