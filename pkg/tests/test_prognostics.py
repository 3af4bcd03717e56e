import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprog.datagen import SimConfig, generate_population, generate_test_set
from fedprog.frsvd import FrsvdConfig, centralized_mfpca_svd
from fedprog.llsreg import GdConfig
from fedprog.prognostics import (
    FALLBACK_EMPTY,
    FALLBACK_NONE,
    FALLBACK_SINGLE,
    ConsistencyError,
    EvalCase,
    PipelineConfig,
    PredictionError,
    PredictionRecord,
    Unit,
    adaptive_filter_truncate,
    concatenate_sensors,
    eval_cases_from_assets,
    evaluate,
    harmonize_users,
    predict_single,
    read_records_csv,
    run_benchmark,
    score_affine,
    units_from_assets,
    write_records_csv,
)

FAST_GD = GdConfig(max_iters=20_000)


@pytest.fixture(scope="module")
def small_world():
    cfg = SimConfig(n_users=8, n_test=6, test_fractions=(0.2, 0.5, 0.9))
    users = units_from_assets(generate_population(cfg, 1))
    tests = eval_cases_from_assets(generate_test_set(cfg, 2), cfg.dt)
    return users, tests


def test_adaptive_truncation_examples():
    sigs = [np.arange(5.0), np.arange(3.0), np.arange(8.0)]
    kept, idx, dropped = adaptive_filter_truncate(sigs, 4)
    assert idx == [0, 2] and dropped == [1]
    assert all(len(k) == 4 for k in kept)
    kept, idx, _ = adaptive_filter_truncate([np.arange(4.0)], 4)
    np.testing.assert_array_equal(kept[0], np.arange(4.0))
    assert adaptive_filter_truncate([np.arange(2.0), np.arange(3.0)], 4)[0] == []


@settings(max_examples=50, deadline=None)
@given(lengths=st.lists(st.integers(1, 30), max_size=15), a=st.integers(1, 30), b=st.integers(1, 30))
def test_shorter_test_keeps_at_least_as_many(lengths, a, b):
    short, long_ = min(a, b), max(a, b)
    sigs = [np.zeros(n) for n in lengths]
    assert len(adaptive_filter_truncate(sigs, short)[1]) >= len(adaptive_filter_truncate(sigs, long_)[1])


def test_concatenate_sensors():
    np.testing.assert_array_equal(concatenate_sensors([[1, 2, 3], [4, 5, 6]], 3), [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(concatenate_sensors([[7.0, 8.0]], 2), [7.0, 8.0])
    with pytest.raises(ConsistencyError):
        concatenate_sensors([[1, 2, 3], [4, 5]], 3)


def test_harmonize_flattens_multi_sensor_units():
    units = [[Unit(np.arange(12.0).reshape(6, 2), 10.0), Unit(np.zeros((2, 2)), 3.0)]]
    parts = harmonize_users(units, 3)
    uid, s, ttf = parts[0]
    np.testing.assert_array_equal(s, [[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]])
    np.testing.assert_array_equal(ttf, [10.0])


def _case(length, ttf=200.0):
    return EvalCase(0, np.zeros((length, 1)), ttf, 0.5, 1.0)


def test_single_sample_fallback():
    users = [[Unit(np.zeros((150, 1)), 120.0)], [Unit(np.zeros((20, 1)), 40.0)]]
    rec, tr = predict_single(_case(130), users, PipelineConfig())
    assert (rec.y_pred, rec.fallback_used) == (130.0, FALLBACK_SINGLE)
    assert len(tr) == 0
    rec, _ = predict_single(_case(100), users, PipelineConfig())
    assert rec.y_pred == 120.0


def test_empty_fallback():
    users = [[Unit(np.zeros((50, 1)), 60.0)]]
    rec, _ = predict_single(_case(87), users, PipelineConfig())
    assert (rec.y_pred, rec.fallback_used) == (87.0, FALLBACK_EMPTY)


def test_elapsed_uses_time_step():
    case = EvalCase(3, np.zeros((87, 1)), 0.5, 0.3, 0.001)
    rec, _ = predict_single(case, [[]], PipelineConfig())
    assert rec.y_pred == pytest.approx(0.087)


def test_proposed_matches_pooled_rsvd(small_world):
    users, tests = small_world
    base = PipelineConfig(gd=FAST_GD)
    for case in tests:
        a, tr = predict_single(case, users, base, seed=11)
        b, _ = predict_single(case, users, PipelineConfig(gd=FAST_GD, method="nonfed_rsvd"), seed=11)
        assert a.fallback_used == b.fallback_used
        assert abs(a.y_pred - b.y_pred) <= 1e-9
        if a.fallback_used == FALLBACK_NONE:
            assert tr.meta["audit"]["passed"] and tr.meta["audit"]["multiplier_checks"] > 0
            assert tr.meta["n_params"] == a.n_components + 2


def test_standardized_scores_match_pooled_rsvd(small_world):
    users, tests = small_world
    fed = PipelineConfig(gd=FAST_GD, score_scaling="standardize")
    pooled = PipelineConfig(gd=FAST_GD, score_scaling="standardize", method="nonfed_rsvd")
    a, tr = predict_single(tests[0], users, fed, seed=11)
    b, _ = predict_single(tests[0], users, pooled, seed=11)
    assert a.fallback_used == FALLBACK_NONE
    assert abs(a.y_pred - b.y_pred) <= 1e-9
    labels = {t.label for t in tr}
    assert {"score_shift", "score_scale"} <= labels and tr.meta["audit"]["passed"]


def test_score_affine_standardizes():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(40, 9)) * np.arange(1, 10) + 50.0
    vecs, eig = centralized_mfpca_svd(s)
    v = vecs[:, :3]
    shift, scale = score_affine(s.mean(axis=0), v, np.sqrt(eig), s.shape[0])
    z = (s @ v - shift) / scale
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, rtol=1e-10)


def test_seed_determinism(small_world):
    users, tests = small_world
    cfg = PipelineConfig(gd=FAST_GD)
    a, _ = predict_single(tests[2], users, cfg, seed=5)
    b, _ = predict_single(tests[2], users, cfg, seed=5)
    assert a == b


def test_errors_carry_test_id(small_world):
    users, tests = small_world
    cfg = PipelineConfig(gd=GdConfig(alpha=50.0, max_iters=500), method="nonfed_svd")
    with pytest.raises(PredictionError) as info:
        predict_single(tests[0], users, cfg)
    assert info.value.test_id == tests[0].test_id


def test_evaluate_examples():
    recs = [PredictionRecord(k, 0.1, 1.0, 1.0 + e) for k, e in enumerate((0.1, 0.2, 0.3))]
    s = evaluate(recs)
    assert s["median"] == pytest.approx(0.2) and s["iqr"] == pytest.approx(0.1)
    single = evaluate(recs[:1])
    assert single["median"] == pytest.approx(0.1) and single["iqr"] == 0.0
    mixed = evaluate([PredictionRecord(0, 0.1, 2.0, 3.0), PredictionRecord(1, 0.9, 2.0, 2.5)])
    assert set(mixed["per_fraction"]) == {"0.1", "0.9"}
    with pytest.raises(ValueError):
        evaluate([])


def test_records_csv_roundtrip(tmp_path):
    recs = [PredictionRecord(0, 0.1, 0.61, 0.6, FALLBACK_NONE, "proposed"),
            PredictionRecord(1, None, 150.0, 130.0, FALLBACK_SINGLE, "individual:2")]
    write_records_csv(recs, tmp_path / "r.csv")
    back = read_records_csv(tmp_path / "r.csv")
    for a, b in zip(recs, back):
        assert (a.test_id, a.truncation_fraction, a.method, a.y_true, a.y_pred, a.fallback_used) == \
            (b.test_id, b.truncation_fraction, b.method, b.y_true, b.y_pred, b.fallback_used)
        assert a.rel_err == abs(b.y_pred - b.y_true) / abs(b.y_true)


def test_benchmark_single_method(small_world):
    users, tests = small_world
    res = run_benchmark(users, tests, ["proposed"], PipelineConfig(gd=FAST_GD), seed=0)
    assert list(res.summaries) == ["proposed"]
    assert len(res.records["proposed"]) == len(tests)
    assert res.cost["total"] == res.cost["upload"] + res.cost["download"] > 0


def test_benchmark_individual_degenerate_user(small_world):
    users, tests = small_world
    users = users + [[Unit(np.zeros((1, 1)), 0.01)]]
    res = run_benchmark(users, tests, ["individual"], PipelineConfig(gd=FAST_GD), seed=0)
    assert len(res.summaries) == len(users)
    last = res.records[f"individual:{len(users) - 1}"]
    assert all(r.fallback_used != FALLBACK_NONE for r in last)


def test_benchmark_parallel_matches_serial(small_world):
    users, tests = small_world
    cfg = PipelineConfig(gd=GdConfig(max_iters=2000), frsvd=FrsvdConfig(k=2, r=3))
    a = run_benchmark(users, tests, ["nonfed_svd"], cfg, seed=3)
    b = run_benchmark(users, tests, ["nonfed_svd"], cfg, seed=3, n_jobs=2)
    assert a.records == b.records


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(method="magic")
    with pytest.raises(ValueError):
        PipelineConfig(method="individual")
    with pytest.raises(ValueError):
        PipelineConfig(dist="gamma")
