"""End-to-end failure-time prediction with adaptive truncation.

For every test signal the training population is re-harmonized: each user
drops training signals shorter than the test signal and truncates the rest to
its length. Multi-sensor signals are flattened sensor by sensor. A principal
basis is extracted (federated RSVD, pooled RSVD, exact SVD or per-user SVD),
the scores are regressed against log failure times and the fitted median is
the point prediction.

Two degenerate cases bypass the model: with a single retained training signal
the prediction is the larger of its failure time and the elapsed test time;
with none it is the elapsed test time.
"""

from __future__ import annotations

import csv
import math
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fedcore import Federation, Message, Transcript, UserState, audit_transcript
from .frsvd import (
    FrsvdConfig,
    centralized_mfpca_svd,
    centralized_rsvd,
    compute_scores,
    federated_rsvd,
    select_k_fve,
)
from .llsreg import DISTRIBUTIONS, GdConfig, centralized_fit, federated_fit, predict_ttf

METHODS = ("proposed", "nonfed_rsvd", "nonfed_svd", "individual")
FALLBACK_NONE = "none"
FALLBACK_SINGLE = "single_sample"
FALLBACK_EMPTY = "empty"
SCORE_SCALINGS = ("none", "standardize")

_STREAM_W, _STREAM_P, _STREAM_THETA = 0, 1, 2


class ConsistencyError(ValueError):
    pass


class PredictionError(RuntimeError):
    def __init__(self, test_id, cause: BaseException):
        super().__init__(f"test {test_id}: {cause}")
        self.test_id = test_id
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    frsvd: FrsvdConfig = FrsvdConfig()
    dist: str = "normal"
    gd: GdConfig = GdConfig()
    method: str = "proposed"
    individual_user: Optional[int] = None
    log_response: bool = True
    audit: bool = True
    score_scaling: str = "none"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.dist not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.dist!r}")
        if self.method == "individual" and self.individual_user is None:
            raise ValueError("method 'individual' needs individual_user")
        if self.score_scaling not in SCORE_SCALINGS:
            raise ValueError(f"score_scaling must be one of {SCORE_SCALINGS}")

    @property
    def fve_threshold(self) -> float:
        return self.frsvd.fve_threshold

    @property
    def label(self) -> str:
        if self.method == "individual":
            return f"individual:{self.individual_user}"
        return self.method


@dataclass
class Unit:
    """One training asset: ``signal`` is ``n_obs x n_sensors``; ``ttf`` its failure time."""

    signal: np.ndarray
    ttf: float

    @property
    def length(self) -> int:
        return self.signal.shape[0]


@dataclass
class EvalCase:
    test_id: int
    signal: np.ndarray
    ttf: float
    fraction: Optional[float] = None
    time_step: float = 1.0

    @property
    def length(self) -> int:
        return self.signal.shape[0]

    @property
    def elapsed(self) -> float:
        return self.length * self.time_step


@dataclass
class PredictionRecord:
    test_id: int
    truncation_fraction: Optional[float]
    y_true: float
    y_pred: float
    fallback_used: str = FALLBACK_NONE
    method: str = "proposed"
    n_components: int = 0
    n_train: int = 0

    @property
    def rel_err(self) -> float:
        return abs(self.y_pred - self.y_true) / abs(self.y_true)


RECORD_FIELDS = ("test_id", "truncation_fraction", "method", "y_true", "y_pred", "rel_err",
                 "fallback_used")


def write_records_csv(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            frac = "" if r.truncation_fraction is None else repr(float(r.truncation_fraction))
            w.writerow([r.test_id, frac, r.method, repr(float(r.y_true)), repr(float(r.y_pred)),
                        repr(r.rel_err), r.fallback_used])


def read_records_csv(path) -> List[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frac = float(row["truncation_fraction"]) if row["truncation_fraction"] else None
            out.append(PredictionRecord(int(row["test_id"]), frac, float(row["y_true"]),
                                        float(row["y_pred"]), row["fallback_used"],
                                        row["method"]))
    return out


# --- data preparation ----------------------------------------------------

def adaptive_filter_truncate(signals: Sequence[np.ndarray], test_len: int):
    """Drop signals shorter than ``test_len``; cut the rest to ``test_len`` rows.

    Returns ``(retained, kept_idx, dropped_idx)``.
    """
    if test_len < 1:
        raise ValueError("test_len must be >= 1")
    retained, kept, dropped = [], [], []
    for idx, s in enumerate(signals):
        if len(s) < test_len:
            dropped.append(idx)
        else:
            retained.append(s[:test_len])
            kept.append(idx)
    return retained, kept, dropped


def concatenate_sensors(blocks: Sequence[np.ndarray], test_len: int) -> np.ndarray:
    """Join per-sensor series (each ``test_len`` long) into one vector."""
    for b in blocks:
        if len(b) != test_len:
            raise ConsistencyError(f"sensor block has length {len(b)}, expected {test_len}")
    return np.concatenate([np.asarray(b, dtype=float) for b in blocks])


def flatten_signal(signal: np.ndarray, test_len: int) -> np.ndarray:
    """``n_obs x n_sensors`` signal -> concatenated sensor blocks."""
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    return concatenate_sensors(list(signal.T), test_len)


def units_from_assets(users) -> List[List[Unit]]:
    """Simulation assets -> single-sensor units."""
    return [[Unit(a.signal[:, None], a.ttf) for a in assets] for assets in users]


def eval_cases_from_assets(assets, dt: float) -> List[EvalCase]:
    return [EvalCase(a.meta.get("test_id", k), a.signal[:, None], a.ttf, a.fraction, dt)
            for k, a in enumerate(assets)]


def units_from_engines(groups) -> List[List[Unit]]:
    """Run-to-failure engines: the failure time is the last observed cycle."""
    return [[Unit(e.sensors, float(e.n_cycles)) for e in g] for g in groups]


def eval_cases_from_engines(engines, rul) -> List[EvalCase]:
    return [EvalCase(k, e.sensors, float(e.n_cycles + r), None, 1.0)
            for k, (e, r) in enumerate(zip(engines, rul))]


# --- single prediction ---------------------------------------------------

def derive_seeds(seed: int, test_id: int) -> Tuple[int, int, int]:
    """Per-test seeds for ``W``, ``P`` and the initial ``theta``."""
    out = []
    for stream in (_STREAM_W, _STREAM_P, _STREAM_THETA):
        ss = np.random.SeedSequence(seed, spawn_key=(int(test_id), stream))
        out.append(int(ss.generate_state(1, dtype=np.uint32)[0]))
    return tuple(out)


def harmonize_users(users: Sequence[Sequence[Unit]], test_len: int, only: Optional[int] = None):
    """Per user: ``(user_id, S_i, ttf_i)`` with at least one retained signal."""
    out = []
    for uid, units in enumerate(users):
        if only is not None and uid != only:
            continue
        kept_sig, kept_idx, _ = adaptive_filter_truncate([u.signal for u in units], test_len)
        if not kept_idx:
            continue
        s = np.vstack([flatten_signal(sig, test_len) for sig in kept_sig])
        out.append((uid, s, np.array([units[k].ttf for k in kept_idx], dtype=float)))
    return out


def _exact_k(cfg: FrsvdConfig, sigma: np.ndarray) -> int:
    available = int(np.sum(sigma > sigma[0] * max(sigma.shape[0], 1) * np.finfo(float).eps)) \
        if sigma.size and sigma[0] > 0 else 0
    available = min(available, cfg.sketch_cols)
    if cfg.k is not None:
        return min(cfg.k, max(available, 1))
    window = sigma[:cfg.sketch_cols]
    return max(1, min(select_k_fve(window, cfg.fve_threshold), cfg.k_cap, max(available, 1)))


def predict_single(test: EvalCase, users: Sequence[Sequence[Unit]], cfg: PipelineConfig,
                   seed: int = 0) -> Tuple[PredictionRecord, Transcript]:
    """Predict the failure time of one partially observed test signal."""
    transcript = Transcript({"test_id": test.test_id})
    if test.length < 1:
        raise ValueError("test signal is empty")
    only = cfg.individual_user if cfg.method == "individual" else None
    parts = harmonize_users(users, test.length, only)
    n_train = sum(len(t) for _, _, t in parts)

    def record(y_pred, fallback, k=0):
        return PredictionRecord(test.test_id, test.fraction, test.ttf, float(y_pred), fallback,
                                cfg.label, k, n_train)

    if n_train == 0:
        return record(test.elapsed, FALLBACK_EMPTY), transcript
    if n_train == 1:
        return record(max(parts[0][2][0], test.elapsed), FALLBACK_SINGLE), transcript

    try:
        y_pred, k = _model_prediction(test, parts, cfg, seed, transcript)
    except Exception as exc:
        raise PredictionError(test.test_id, exc) from exc
    return record(y_pred, FALLBACK_NONE, k), transcript


def score_affine(col_mean: np.ndarray, v: np.ndarray, sigma: np.ndarray, n_rows: int):
    """Shift and scale that standardize the scores ``s @ v`` over the training rows.

    The shift is the mean score ``col_mean @ v`` and the scale the score
    standard deviation ``sigma / sqrt(n_rows)``; both follow from the
    decomposition without another pass over the data.
    """
    shift = np.asarray(col_mean) @ v
    scale = np.asarray(sigma[:v.shape[1]], dtype=float) / math.sqrt(n_rows)
    scale = np.where(scale > 0, scale, 1.0)
    return shift, scale


def _model_prediction(test, parts, cfg: PipelineConfig, seed, transcript):
    seed_w, seed_p, seed_theta = derive_seeds(seed, test.test_id)
    gd = replace(cfg.gd, init_seed=seed_theta)
    n_rows = sum(s.shape[0] for _, s, _ in parts)
    n_cols = parts[0][1].shape[1]
    fcfg = cfg.frsvd.fit_to(n_rows, n_cols)
    x_test = flatten_signal(test.signal, test.length)
    standardize = cfg.score_scaling == "standardize"

    def response(t):
        return np.log(t) if cfg.log_response else t

    def design(scores, shift, scale):
        if standardize:
            scores = (scores - shift) / scale
        return np.hstack([np.ones((scores.shape[0], 1)), scores])

    if cfg.method == "proposed":
        states = [UserState(uid, s, t) for uid, s, t in parts]
        out, _ = federated_rsvd(states, fcfg, seed_w, seed_p, transcript=transcript,
                                keep_payloads=cfg.audit)
        v = out.v
        shift, scale = score_affine(out.col_mean, v, out.sigma, n_rows)
        if standardize:
            Federation(states, transcript, keep_payloads=False).broadcast_only(
                {"score_shift": Message(shift), "score_scale": Message(scale)})
        fit_parts = [(design(compute_scores(s, v), shift, scale), response(t))
                     for _, s, t in parts]
        fit, _ = federated_fit(fit_parts, gd, cfg.dist, user_ids=[uid for uid, _, _ in parts],
                               transcript=transcript)
        if cfg.audit:
            report = audit_transcript(transcript)
            report.raise_if_failed()
            transcript.meta["audit"] = {"passed": report.passed, "uploads": report.n_uploads,
                                        "multiplier_checks": report.n_multiplier_checks}
            for t in transcript.transfers:
                t.payload = None
    else:
        s_all = np.vstack([s for _, s, _ in parts])
        t_all = np.concatenate([t for _, _, t in parts])
        if cfg.method == "nonfed_rsvd":
            out = centralized_rsvd(s_all, fcfg, seed_w, seed_p)
            v, sigma, col_mean = out.v, out.sigma, out.col_mean
        else:
            vecs, eig = centralized_mfpca_svd(s_all)
            sigma = np.sqrt(eig)
            v = vecs[:, :_exact_k(fcfg, sigma)]
            col_mean = s_all.mean(axis=0)
        shift, scale = score_affine(col_mean, v, sigma, n_rows)
        fit = centralized_fit(design(compute_scores(s_all, v), shift, scale), response(t_all),
                              gd, cfg.dist)

    x_new = design((x_test @ v)[None, :], shift, scale)[0]
    y_pred = predict_ttf(x_new, fit.theta_star, cfg.dist, 0.5)
    if not cfg.log_response:
        y_pred = math.log(y_pred)
    return y_pred, v.shape[1]


# --- evaluation ----------------------------------------------------------

def _median_iqr(values) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1), "n": int(len(values))}


def evaluate(records: Sequence[PredictionRecord]) -> dict:
    """Median and interquartile range of relative errors, overall and per fraction."""
    if not records:
        raise ValueError("no records to evaluate")
    summary = _median_iqr([r.rel_err for r in records])
    groups = defaultdict(list)
    for r in records:
        if r.truncation_fraction is not None:
            groups[float(r.truncation_fraction)].append(r.rel_err)
    summary["per_fraction"] = {f"{f:g}": _median_iqr(v) for f, v in sorted(groups.items())}
    summary["fallbacks"] = {kind: sum(r.fallback_used == kind for r in records)
                            for kind in (FALLBACK_SINGLE, FALLBACK_EMPTY)}
    return summary


@dataclass
class BenchmarkResult:
    records: Dict[str, List[PredictionRecord]]
    summaries: Dict[str, dict]
    cost: Dict[str, int] = field(default_factory=dict)
    wall_time: Dict[str, float] = field(default_factory=dict)
    transcripts: List[Transcript] = field(default_factory=list)

    def all_records(self) -> List[PredictionRecord]:
        return [r for recs in self.records.values() for r in recs]


def _predict_many(args):
    tests, users, cfg, seed = args
    return [predict_single(t, users, cfg, seed) for t in tests]


def run_method(tests: Sequence[EvalCase], users, cfg: PipelineConfig, seed: int,
               n_jobs: int = 1) -> List[Tuple[PredictionRecord, Transcript]]:
    """Predict every test case; test cases are independent and may run in parallel."""
    if n_jobs <= 1 or len(tests) < 2:
        return _predict_many((tests, users, cfg, seed))
    chunks = [list(tests[k::n_jobs]) for k in range(n_jobs)]
    with ProcessPoolExecutor(n_jobs) as pool:
        results = list(pool.map(_predict_many, [(c, users, cfg, seed) for c in chunks]))
    by_id = {rec.test_id: (rec, tr) for chunk in results for rec, tr in chunk}
    return [by_id[t.test_id] for t in tests]


def run_benchmark(users: Sequence[Sequence[Unit]], tests: Sequence[EvalCase],
                  methods: Sequence[str], base: PipelineConfig, seed: int,
                  n_jobs: int = 1, keep_transcripts: bool = False) -> BenchmarkResult:
    """Evaluate each method on the same test set with the same per-test seeds.

    ``individual`` expands to one model per user, each summarized separately.
    Cost totals are accumulated over the federated runs.
    """
    result = BenchmarkResult({}, {})
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        cfgs = ([replace(base, method=method, individual_user=uid) for uid in range(len(users))]
                if method == "individual" else [replace(base, method=method)])
        for cfg in cfgs:
            start = time.perf_counter()
            outcome = run_method(tests, users, cfg, seed, n_jobs)
            result.wall_time[cfg.label] = time.perf_counter() - start
            recs = [rec for rec, _ in outcome]
            result.records[cfg.label] = recs
            result.summaries[cfg.label] = evaluate(recs)
            if method == "proposed":
                for _, tr in outcome:
                    meter = tr.cost_meter()
                    for key, val in (("upload", meter.total_upload),
                                     ("download", meter.total_download),
                                     ("total", meter.total)):
                        result.cost[key] = result.cost.get(key, 0) + val
                    if keep_transcripts:
                        result.transcripts.append(tr)
    return result
