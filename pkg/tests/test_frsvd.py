import numpy as np
import pytest
from conftest import spectrum_matrix, split_rows

from fedprog.fedcore import audit_transcript
from fedprog.frsvd import (
    DegenerateSpectrumError,
    FrsvdConfig,
    InsufficientDataError,
    PrivacyError,
    centralized_mfpca_eig,
    centralized_mfpca_svd,
    centralized_rsvd,
    comm_cost_formula,
    compute_scores,
    exact_comm_cost,
    federated_rsvd,
    fsvd_cost_formula,
    select_k_fve,
)
from fedprog.linalg import RankError, principal_angles


def _align(a, b):
    return a * np.sign(np.sum(a * b, axis=0))


@pytest.fixture
def rank2():
    rng = np.random.default_rng(3)
    return rng.normal(size=(6, 2)) @ rng.normal(size=(2, 8))


def test_rank2_single_user_matches_exact(rank2):
    out, _ = federated_rsvd(split_rows(rank2, [6]), FrsvdConfig(k=2, r=2, q=0), 1, 2)
    v_exact, _ = centralized_mfpca_svd(rank2)
    np.testing.assert_allclose(_align(out.v, v_exact[:, :2]), v_exact[:, :2], atol=1e-8)


def test_partition_invariance():
    s = np.random.default_rng(0).normal(size=(30, 50))
    cfg = FrsvdConfig(k=3, r=4, q=2)
    fed, _ = federated_rsvd(split_rows(s, [7, 3, 20]), cfg, 5, 6)
    one, _ = federated_rsvd(split_rows(s, [30]), cfg, 5, 6)
    cen = centralized_rsvd(s, cfg, 5, 6)
    np.testing.assert_allclose(fed.v, cen.v, atol=1e-10)
    np.testing.assert_allclose(fed.sigma, cen.sigma, atol=1e-10)
    np.testing.assert_allclose(one.v, cen.v, atol=1e-12)
    np.testing.assert_allclose(fed.u, cen.u, atol=1e-10)


def test_masking_invariance():
    s = np.random.default_rng(1).normal(size=(25, 40)) + 2.0
    cfg = FrsvdConfig(k=3, r=3, q=1)
    a = centralized_rsvd(s, cfg, 4, 1)
    b = centralized_rsvd(s, cfg, 4, 2)
    for x, y in ((a.v, b.v), (a.sigma, b.sigma), (a.u, b.u)):
        np.testing.assert_allclose(x, y, atol=1e-10)
    assert not np.allclose(a.p_mask, b.p_mask)


def test_output_invariants():
    s = np.random.default_rng(2).normal(size=(20, 35))
    out = centralized_rsvd(s, FrsvdConfig(k=4, r=5), 0, 0)
    np.testing.assert_allclose(out.v.T @ out.v, np.eye(4), atol=1e-10)
    assert np.all(np.diff(out.sigma) <= 0) and np.all(out.sigma >= 0)


def test_exact_rank_recovery():
    s = spectrum_matrix(40, 60, [9.0, 5.0, 2.0], 4)
    s = s - s.mean(axis=0)
    out = centralized_rsvd(s, FrsvdConfig(k=3, r=4, q=0), 1, 2)
    recon = (out.u * out.sigma) @ out.v.T
    assert np.linalg.norm(recon - s) / np.linalg.norm(s) <= 1e-8


def test_gap_approximation_quality():
    sigma = [10.0, 8.0, 6.0] + [0.6] * 20
    s = spectrum_matrix(60, 120, sigma, 5)
    s = s - s.mean(axis=0)
    out = centralized_rsvd(s, FrsvdConfig(k=3, r=5, q=2), 2, 3)
    err = np.linalg.norm(s - (out.u * out.sigma) @ out.v.T)
    sv = np.linalg.svd(s, compute_uv=False)
    assert err <= 1.05 * np.sqrt(np.sum(sv[3:] ** 2))


def test_power_iterations_do_not_hurt():
    s = spectrum_matrix(50, 200, 0.8 ** np.arange(40), 6)
    v_exact = centralized_mfpca_svd(s)[0][:, :3]
    angles = [principal_angles(centralized_rsvd(s, FrsvdConfig(k=3, r=2, q=q), 7, 8).v,
                               v_exact).max() for q in (0, 1, 2)]
    assert angles[0] >= angles[1] >= angles[2]


def test_large_column_mean_does_not_swamp_power_iterations():
    s = spectrum_matrix(30, 120, 0.9 ** np.arange(20), 4) + 1e4
    v_exact = centralized_mfpca_svd(s)[0][:, :3]
    cfg = FrsvdConfig(k=3, r=5, q=3)
    out, _ = federated_rsvd(split_rows(s, [10, 20]), cfg, 1, 2)
    assert principal_angles(out.v, v_exact).max() < 0.1
    np.testing.assert_allclose(out.col_mean, s.mean(axis=0), rtol=1e-10)


def test_low_rank_input_with_oversampling():
    s = spectrum_matrix(30, 50, [4.0, 2.0], 9)
    out = centralized_rsvd(s, FrsvdConfig(k=2, r=6, q=1), 1, 1)
    assert out.k == 2
    with pytest.raises(RankError):
        centralized_rsvd(s, FrsvdConfig(k=4, r=6, q=1), 1, 1)


def test_privacy_refusal():
    s = np.random.default_rng(0).normal(size=(20, 10))
    with pytest.raises(PrivacyError):
        federated_rsvd(split_rows(s, [20]), FrsvdConfig(k=4, r=6), 1, 2)


def test_adaptive_k():
    s = spectrum_matrix(40, 80, [10.0, 3.0, 0.1, 0.1, 0.1], 1) + 1.0
    out = centralized_rsvd(s, FrsvdConfig(k=None, k_cap=4, r=3), 0, 0)
    assert out.k == 2
    # rank-deficient sketch: the basis keeps only the numerical range
    assert len(out.sigma_all) <= 4 + 3 + 1


def test_fit_to_shrinks_sketch():
    cfg = FrsvdConfig(k=None, k_cap=10, r=10).fit_to(8, 100)
    assert cfg.sketch_cols == 7 and cfg.k_cap <= 7
    assert FrsvdConfig(k=3, r=2).fit_to(100, 100) == FrsvdConfig(k=3, r=2)
    assert FrsvdConfig(k=5, r=5).fit_to(100, 4).sketch_cols == 3


def test_too_few_rows():
    with pytest.raises(InsufficientDataError):
        centralized_mfpca_svd(np.ones((1, 3)))


def test_mfpca_one_direction():
    v, _ = centralized_mfpca_svd(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(np.abs(v[:, 0]), [1.0, 0.0], atol=1e-15)


def test_mfpca_routes_agree():
    s = np.random.default_rng(8).normal(size=(10, 6))
    v1, e1 = centralized_mfpca_svd(s)
    v2, e2 = centralized_mfpca_eig(s)
    keep = e1 > 1e-8
    np.testing.assert_allclose(e1[keep], e2[:keep.sum()], rtol=1e-10)
    assert principal_angles(v1[:, keep], v2[:, :keep.sum()]).max() <= 1e-8


def test_constant_rows_have_no_variance():
    _, e = centralized_mfpca_eig(np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_allclose(e, 0.0, atol=1e-12)


@pytest.mark.parametrize("sigma,expected", [((3, 2, 1, 0.1), 3), ((5, 0, 0), 1), ((1, 1, 1, 1), 4)])
def test_select_k_fve(sigma, expected):
    assert select_k_fve(sigma, 0.95) == expected


def test_select_k_fve_degenerate():
    with pytest.raises(DegenerateSpectrumError):
        select_k_fve([0.0, 0.0], 0.95)


def test_scores():
    s = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(compute_scores(s, np.eye(4)[:, [0, 2]]), s[:, [0, 2]])
    np.testing.assert_array_equal(compute_scores(np.zeros((2, 4)), np.eye(4)), 0.0)
    v = centralized_mfpca_svd(s)[0][:, :2]
    shift = compute_scores(s, v) - compute_scores(s - s.mean(axis=0), v)
    assert np.all(shift.std(axis=0) <= 1e-10)
    with pytest.raises(ValueError):
        compute_scores(s, np.eye(3))


def test_cost_formulas():
    assert comm_cost_formula(90, 10, 2, 100_000, True) == 6.8e7
    assert comm_cost_formula(90, 10, 2, 100_000, False) == 2.8e7
    assert fsvd_cost_formula(100_000, 500) == 2.01e10


def test_transcript_matches_exact_cost():
    s = np.random.default_rng(4).normal(size=(24, 90))
    sizes = [5, 9, 10]
    cfg = FrsvdConfig(k=4, r=3, q=2)
    out, tr = federated_rsvd(split_rows(s, sizes), cfg, 1, 2)
    exact = exact_comm_cost(90, sizes, cfg.sketch_cols, tr.meta["basis_cols"], out.k, cfg.q)
    meter = tr.cost_meter()
    assert (meter.total_upload, meter.total_download) == (exact["upload"], exact["download"])
    dominant = 3 * comm_cost_formula(4, 3, 2, 90, True)
    # left out of the dominant term: Y_i, Q_i, P, a~_i, U^, Sigma^ and the
    # B~_i rows beyond K (oversampling plus mean direction)
    minor = exact["total"] - dominant
    mb, m = tr.meta["basis_cols"], cfg.sketch_cols
    assert minor == 24 * m + 24 * mb + 3 * (mb * mb + mb + mb * 4 + 4) + 3 * 90 * (mb - 4)
    assert audit_transcript(tr).passed


def test_output_csv(tmp_path):
    out = centralized_rsvd(np.random.default_rng(0).normal(size=(10, 20)), FrsvdConfig(k=2, r=2), 0, 0)
    out.to_csv(tmp_path)
    np.testing.assert_allclose(np.loadtxt(tmp_path / "v.csv", delimiter=","), out.v)
