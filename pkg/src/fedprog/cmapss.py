"""C-MAPSS turbofan data: parsing, sensor selection and user partitioning.

The text format has one row per engine cycle with 26 whitespace-separated
numbers: unit id, cycle, three operational settings and 21 sensor readings.
The RUL file holds one integer per test engine.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

N_FIELDS = 26
N_SENSORS = 21
# 1-based sensor numbers that carry degradation information in FD001.
INFORMATIVE_SENSORS = (2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21)


class ParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ConsistencyError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class EngineRecord:
    unit_id: int
    sensors: np.ndarray  # n_cycles x n_sensor_columns
    op_settings: np.ndarray  # n_cycles x 3
    sensor_ids: tuple = tuple(range(1, N_SENSORS + 1))

    @property
    def n_cycles(self) -> int:
        return self.sensors.shape[0]


@dataclass(frozen=True)
class Fd001Dataset:
    train: List[EngineRecord]
    test: List[EngineRecord]
    rul: np.ndarray

    @property
    def sensor_ids(self) -> tuple:
        return self.train[0].sensor_ids if self.train else tuple(range(1, N_SENSORS + 1))

    def test_ttf(self) -> np.ndarray:
        """True failure cycle of each test engine (observed cycles + RUL)."""
        return np.array([e.n_cycles for e in self.test]) + self.rul


def _read_rows(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_FIELDS:
                raise ParseError(path, lineno, f"expected {N_FIELDS} fields, found {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return np.asarray(rows, dtype=float).reshape(-1, N_FIELDS)


def read_engines(path) -> List[EngineRecord]:
    """Parse one C-MAPSS train/test file into engines ordered by unit id."""
    data = _read_rows(path)
    engines = []
    for unit in np.unique(data[:, 0]):
        block = data[data[:, 0] == unit]
        block = block[np.argsort(block[:, 1], kind="stable")]
        cycles = block[:, 1]
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            raise ConsistencyError(f"{path}: unit {int(unit)} cycles are not 1..{len(cycles)}")
        engines.append(EngineRecord(unit_id=int(unit), sensors=block[:, 5:].copy(),
                                    op_settings=block[:, 2:5].copy()))
    return engines


def read_rul(path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1:
                raise ParseError(path, lineno, f"expected one integer, found {len(parts)} fields")
            try:
                values.append(int(float(parts[0])))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return np.asarray(values, dtype=int)


def parse_cmapss(train_path, test_path, rul_path) -> Fd001Dataset:
    for p in (train_path, test_path, rul_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    train = read_engines(train_path)
    test = read_engines(test_path)
    rul = read_rul(rul_path)
    if len(rul) != len(test):
        raise ConsistencyError(
            f"RUL file has {len(rul)} entries but test file has {len(test)} engines")
    if np.any(rul < 0):
        raise ConsistencyError("negative RUL value")
    return Fd001Dataset(train=train, test=test, rul=rul)


def flat_sensors(ds: Fd001Dataset, rtol: float = 1e-8) -> tuple:
    """1-based ids of sensors whose training readings are (near) constant."""
    stacked = np.vstack([e.sensors for e in ds.train])
    spread = stacked.std(axis=0)
    scale = np.maximum(np.abs(stacked).mean(axis=0), 1.0)
    return tuple(sid for sid, s, m in zip(ds.sensor_ids, spread, scale) if s <= rtol * m)


def select_sensors(ds: Fd001Dataset, keep: Optional[Sequence[int]] = None,
                   detect_flat: bool = False) -> Fd001Dataset:
    """Keep only informative sensor columns.

    By default the fixed FD001 list is used. ``detect_flat=True`` instead drops
    sensors whose training readings have (numerically) zero variance, for other
    subsets.
    """
    if ds.sensor_ids != tuple(range(1, N_SENSORS + 1)):
        raise SelectionError("sensors have already been selected")
    if detect_flat:
        flat = set(flat_sensors(ds))
        keep = [s for s in ds.sensor_ids if s not in flat]
    elif keep is None:
        keep = INFORMATIVE_SENSORS
    keep = tuple(int(s) for s in keep)
    cols = [s - 1 for s in keep]

    def _sel(e: EngineRecord) -> EngineRecord:
        return replace(e, sensors=e.sensors[:, cols], sensor_ids=keep)

    return Fd001Dataset(train=[_sel(e) for e in ds.train], test=[_sel(e) for e in ds.test],
                        rul=ds.rul.copy())


def partition_users(engines: Sequence, sizes: Sequence[int], seed: int) -> List[list]:
    """Shuffle ``engines`` with ``seed`` and split into groups of ``sizes``."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) != len(engines):
        raise ConfigError(f"group sizes {sizes} do not sum to {len(engines)} engines")
    order = np.random.default_rng(seed).permutation(len(engines))
    groups, start = [], 0
    for s in sizes:
        groups.append([engines[k] for k in order[start:start + s]])
        start += s
    return groups


def write_cmapss_file(path, engines: Sequence[EngineRecord]) -> None:
    """Write engines back in the 26-column text format (used for fixtures)."""
    with open(path, "w") as fh:
        for e in engines:
            for t in range(e.n_cycles):
                vals = [e.unit_id, t + 1, *e.op_settings[t], *e.sensors[t]]
                fh.write(" ".join(repr(float(v)) if k >= 2 else str(int(v))
                                  for k, v in enumerate(vals)) + "\n")
