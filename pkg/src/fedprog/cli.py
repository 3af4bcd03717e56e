"""Batch experiment runner.

Usage::

    fedprog simulate  [--config FILE] [--set key=value ...]
    fedprog cmapss    [--config FILE] [--set key=value ...]
    fedprog costbench [--config FILE] [--set key=value ...]

The config file is flat ``key = value`` text with dotted keys and ``#``
comments. Every key and its default is listed in :data:`DEFAULTS`. Lists are
comma separated; ``none`` means unset.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from . import cmapss as cm
from .datagen import ConfigError as SimConfigError
from .datagen import SimConfig, generate_population, generate_test_set
from .fedcore import UserState
from .frsvd import (
    FrsvdConfig,
    comm_cost_formula,
    exact_comm_cost,
    federated_rsvd,
    fsvd_cost_formula,
)
from .llsreg import GdConfig
from .prognostics import (
    METHODS,
    PipelineConfig,
    harmonize_users,
    run_benchmark,
    eval_cases_from_assets,
    eval_cases_from_engines,
    units_from_assets,
    units_from_engines,
    write_records_csv,
)

_SIM = SimConfig()

DEFAULTS: Dict[str, str] = {
    "seed": "0",
    "output_dir": "results",
    "methods": ",".join(METHODS),
    "n_jobs": "1",
    **{f"sim.{f.name}": None for f in fields(SimConfig)},
    "pipeline.dist": "normal",
    "pipeline.log_response": "true",
    "pipeline.audit": "true",
    "pipeline.score_scaling": "none",
    "pipeline.frsvd.k": "none",
    "pipeline.frsvd.r": "10",
    "pipeline.frsvd.q": "2",
    "pipeline.frsvd.k_cap": "10",
    "pipeline.frsvd.fve_threshold": "0.95",
    "pipeline.gd.alpha": "none",
    "pipeline.gd.delta": "1e-8",
    "pipeline.gd.max_iters": "100000",
    "pipeline.gd.divergence_patience": "50",
    "cmapss.train": "train_FD001.txt",
    "cmapss.test": "test_FD001.txt",
    "cmapss.rul": "RUL_FD001.txt",
    "cmapss.group_sizes": "10,30,60",
    "cmapss.detect_flat": "false",
    "costbench.user_counts": "100,200,300,400,500,600,700,800",
    "costbench.length": "100",
    "costbench.k": "10",
    "costbench.r": "10",
    "costbench.q": "2",
    "costbench.measure": "true",
    "costbench.samples_per_user": "5",
}
for _f in fields(SimConfig):
    _v = getattr(_SIM, _f.name)
    DEFAULTS[f"sim.{_f.name}"] = ",".join(map(str, _v)) if isinstance(_v, tuple) else str(_v)

# Raw turbofan readings are in the thousands, so uncentered scores make plain
# gradient descent diverge at the default step size.
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, str]] = {
    "cmapss": {"pipeline.score_scaling": "standardize"},
}

# substreams of the top-level seed
_POPULATION, _TESTS, _PARTITION, _PIPELINE = range(4)


class ConfigError(ValueError):
    pass


def substream_seed(seed: int, stream: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(stream,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def merge_config(file_values: Dict[str, str], overrides: List[str],
                 experiment: Optional[str] = None) -> Dict[str, str]:
    cfg = dict(DEFAULTS)
    cfg.update(EXPERIMENT_DEFAULTS.get(experiment, {}))
    extra = dict(file_values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        extra[k.strip()] = v.strip()
    unknown = sorted(set(extra) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(extra)
    return cfg


def _num(value: str, kind, key: str):
    if value.lower() == "none":
        return None
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def _bool(value: str, key: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def _list(value: str, kind, key: str) -> tuple:
    return tuple(_num(v.strip(), kind, key) for v in value.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    output_dir: str
    methods: tuple
    n_jobs: int
    sim: SimConfig
    pipeline: PipelineConfig
    cmapss_paths: tuple
    group_sizes: tuple
    detect_flat: bool
    raw: Dict[str, str]


def build_config(experiment: str, raw: Dict[str, str]) -> ExperimentConfig:
    sim_kwargs = {}
    for f in fields(SimConfig):
        key = f"sim.{f.name}"
        default = getattr(_SIM, f.name)
        if isinstance(default, tuple):
            sim_kwargs[f.name] = _list(raw[key], float, key)
        else:
            sim_kwargs[f.name] = _num(raw[key], type(default), key)
    try:
        sim = SimConfig(**sim_kwargs).validate()
        if experiment == "simulate" and sim.n_test % len(sim.test_fractions):
            raise ConfigError(f"sim.n_test={sim.n_test} is not divisible by "
                              f"{len(sim.test_fractions)} test fractions")
        frsvd = FrsvdConfig(
            k=_num(raw["pipeline.frsvd.k"], int, "pipeline.frsvd.k"),
            r=_num(raw["pipeline.frsvd.r"], int, "pipeline.frsvd.r"),
            q=_num(raw["pipeline.frsvd.q"], int, "pipeline.frsvd.q"),
            k_cap=_num(raw["pipeline.frsvd.k_cap"], int, "pipeline.frsvd.k_cap"),
            fve_threshold=_num(raw["pipeline.frsvd.fve_threshold"], float,
                               "pipeline.frsvd.fve_threshold"))
        gd = GdConfig(
            alpha=_num(raw["pipeline.gd.alpha"], float, "pipeline.gd.alpha"),
            delta=_num(raw["pipeline.gd.delta"], float, "pipeline.gd.delta"),
            max_iters=_num(raw["pipeline.gd.max_iters"], int, "pipeline.gd.max_iters"),
            divergence_patience=_num(raw["pipeline.gd.divergence_patience"], int,
                                     "pipeline.gd.divergence_patience"))
        pipeline = PipelineConfig(frsvd=frsvd, gd=gd, dist=raw["pipeline.dist"],
                                  log_response=_bool(raw["pipeline.log_response"],
                                                     "pipeline.log_response"),
                                  audit=_bool(raw["pipeline.audit"], "pipeline.audit"),
                                  score_scaling=raw["pipeline.score_scaling"])
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    methods = tuple(m.strip() for m in raw["methods"].split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"methods must be a nonempty subset of {METHODS}, got {methods}")
    return ExperimentConfig(
        experiment=experiment,
        seed=_num(raw["seed"], int, "seed"),
        output_dir=raw["output_dir"],
        methods=methods,
        n_jobs=max(1, _num(raw["n_jobs"], int, "n_jobs")),
        sim=sim,
        pipeline=pipeline,
        cmapss_paths=(raw["cmapss.train"], raw["cmapss.test"], raw["cmapss.rul"]),
        group_sizes=_list(raw["cmapss.group_sizes"], int, "cmapss.group_sizes"),
        detect_flat=_bool(raw["cmapss.detect_flat"], "cmapss.detect_flat"),
        raw=raw,
    )


# --- experiments ---------------------------------------------------------

def _write_benchmark(cfg: ExperimentConfig, result, started: float, extra: dict) -> None:
    out = cfg.output_dir
    write_records_csv(result.all_records(), os.path.join(out, "records.csv"))
    with open(os.path.join(out, "transcript.jsonl"), "w") as fh:
        for tr in result.transcripts:
            tid = tr.meta.get("test_id")
            for t in tr.transfers:
                fh.write(json.dumps({"test_id": tid, **t.to_json()}) + "\n")
    summary = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "methods": result.summaries,
        "cost": result.cost,
        "method_wall_time_s": result.wall_time,
        "wall_time_s": time.perf_counter() - started,
        "config": cfg.raw,
        **extra,
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def run_simulate(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    pop = generate_population(cfg.sim, substream_seed(cfg.seed, _POPULATION))
    tests = generate_test_set(cfg.sim, substream_seed(cfg.seed, _TESTS))
    result = run_benchmark(units_from_assets(pop), eval_cases_from_assets(tests, cfg.sim.dt),
                           cfg.methods, cfg.pipeline, substream_seed(cfg.seed, _PIPELINE),
                           n_jobs=cfg.n_jobs, keep_transcripts=True)
    _write_benchmark(cfg, result, started, {"n_users": cfg.sim.n_users, "n_tests": len(tests)})
    return 0


def run_cmapss(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    ds = cm.parse_cmapss(*cfg.cmapss_paths)
    ds = cm.select_sensors(ds, detect_flat=cfg.detect_flat)
    groups = cm.partition_users(ds.train, cfg.group_sizes, substream_seed(cfg.seed, _PARTITION))
    result = run_benchmark(units_from_engines(groups), eval_cases_from_engines(ds.test, ds.rul),
                           cfg.methods, cfg.pipeline, substream_seed(cfg.seed, _PIPELINE),
                           n_jobs=cfg.n_jobs, keep_transcripts=True)
    _write_benchmark(cfg, result, started, {"group_sizes": list(cfg.group_sizes),
                                            "sensors": list(ds.sensor_ids)})
    return 0


COST_FIELDS = ("n_users", "n_samples", "length", "k", "r", "q", "wall_time_s", "metered_upload",
               "metered_download", "metered_total", "exact_total", "frsvd_formula",
               "frsvd_formula_low_rank", "fsvd_formula")


def cost_table(raw: Dict[str, str], seed: int, sim: SimConfig) -> List[dict]:
    """One row per user count: measured FRSVD cost next to the closed forms."""
    counts = _list(raw["costbench.user_counts"], int, "costbench.user_counts")
    length = _num(raw["costbench.length"], int, "costbench.length")
    k = _num(raw["costbench.k"], int, "costbench.k")
    r = _num(raw["costbench.r"], int, "costbench.r")
    q = _num(raw["costbench.q"], int, "costbench.q")
    measure = _bool(raw["costbench.measure"], "costbench.measure")
    per_user = _num(raw["costbench.samples_per_user"], int, "costbench.samples_per_user")
    if not counts or min(counts) < 1 or length < 2 or k < 1:
        raise ConfigError("costbench needs positive user counts, length >= 2 and k >= 1")
    fcfg = FrsvdConfig(k=k, r=r, q=q)
    rows = []
    for n_users in counts:
        row = {"n_users": n_users, "length": length, "k": k, "r": r, "q": q,
               "frsvd_formula": comm_cost_formula(k, r, q, length, True),
               "frsvd_formula_low_rank": comm_cost_formula(k, r, q, length, False)}
        if measure:
            pop = generate_population(SimConfig(**{**asdict(sim), "n_users": n_users}),
                                      substream_seed(seed, _POPULATION))
            parts = harmonize_users(units_from_assets(pop), length)
            states = [UserState(uid, s, t) for uid, s, t in parts]
            n_samples = sum(s.n_samples for s in states)
            start = time.perf_counter()
            out, tr = federated_rsvd(states, fcfg, substream_seed(seed, 10),
                                     substream_seed(seed, 11), keep_payloads=False)
            row["wall_time_s"] = time.perf_counter() - start
            meter = tr.cost_meter()
            exact = exact_comm_cost(length, [s.n_samples for s in states], fcfg.sketch_cols,
                                    tr.meta["basis_cols"], out.k, q)
            row.update(n_samples=n_samples, metered_upload=meter.total_upload,
                       metered_download=meter.total_download, metered_total=meter.total,
                       exact_total=exact["total"])
        else:
            n_samples = n_users * per_user
            row.update(n_samples=n_samples, wall_time_s="", metered_upload="",
                       metered_download="", metered_total="", exact_total="")
        row["fsvd_formula"] = fsvd_cost_formula(length, n_samples)
        rows.append(row)
    return rows


def run_costbench(cfg: ExperimentConfig) -> int:
    import csv

    rows = cost_table(cfg.raw, cfg.seed, cfg.sim)
    with open(os.path.join(cfg.output_dir, "cost.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COST_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return 0


RUNNERS = {"simulate": run_simulate, "cmapss": run_cmapss, "costbench": run_costbench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprog", description=__doc__.split("\n")[0])
    parser.add_argument("experiment", choices=sorted(RUNNERS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = {}
        if args.config:
            with open(args.config) as fh:
                file_values = parse_config_text(fh.read())
        cfg = build_config(args.experiment,
                           merge_config(file_values, args.set, args.experiment))
    except (ConfigError, SimConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        os.makedirs(cfg.output_dir, exist_ok=True)
        if not os.access(cfg.output_dir, os.W_OK):
            raise PermissionError(f"output directory {cfg.output_dir} is not writable")
        return RUNNERS[args.experiment](cfg)
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename or exc}", file=sys.stderr)
        return 1
    except (cm.ParseError, cm.ConsistencyError, cm.ConfigError, ConfigError, SimConfigError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
