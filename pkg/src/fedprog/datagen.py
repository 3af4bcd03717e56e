"""Synthetic single-sensor degradation population.

Each asset follows the latent path ``s(t) = -c / ln(t)`` on ``0 < t < 1`` and
fails when the path reaches a threshold ``D``, so ``ln(ttf) = -c/D + eps``.
Signals are sampled every ``dt`` time units with additive Gaussian noise and
training signals are randomly truncated at a ``Beta(2, 3)`` fraction of their
full length.

Randomness is drawn from per-asset substreams keyed by ``(seed, user, asset)``
so a user's assets do not change when the number of users changes.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

_TRAIN_KEY = 0
_TEST_KEY = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_users: int = 100
    samples_low: int = 2
    samples_high: int = 20
    c_mean: float = 1.0
    c_sd: float = 0.25
    threshold_d: float = 2.0
    ttf_noise_sd: float = 0.025
    obs_noise_sd: float = 0.05
    dt: float = 0.001
    trunc_beta: tuple = (2.0, 3.0)
    n_test: int = 50
    test_fractions: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)

    def validate(self) -> "SimConfig":
        if min(self.c_sd, self.ttf_noise_sd, self.obs_noise_sd) <= 0:
            raise ConfigError("noise standard deviations must be positive")
        if not 0 < self.dt < 1:
            raise ConfigError("dt must lie in (0, 1)")
        if self.samples_low < 2 or self.samples_high < self.samples_low:
            raise ConfigError("need 2 <= samples_low <= samples_high")
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if any(not 0 < f <= 1 for f in self.test_fractions):
            raise ConfigError("test fractions must lie in (0, 1]")
        if len(self.trunc_beta) != 2 or min(self.trunc_beta) <= 0:
            raise ConfigError("trunc_beta must be two positive shape parameters")
        return self


@dataclass
class Asset:
    """One simulated asset.

    ``signal`` holds the retained observations at ``tau = dt, 2 dt, ...``;
    ``full_len`` is ``floor(ttf / dt)``.
    """

    c: float
    ttf: float
    signal: np.ndarray
    trunc_len: int
    full_len: int
    fraction: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.trunc_len <= self.full_len:
            raise ValueError("need 1 <= trunc_len <= full_len")
        if len(self.signal) != self.trunc_len:
            raise ValueError("signal length must equal trunc_len")


def failure_time(c: float, eps: float, threshold_d: float) -> float:
    return math.exp(-c / threshold_d + eps)


def full_length(ttf: float, dt: float) -> int:
    # Small slack so e.g. 0.3/0.001 does not floor to 299.
    return int(math.floor(ttf / dt + 1e-9))


def truncation_length(fraction: float, n_full: int) -> int:
    """``ceil(fraction * n_full)`` clamped to ``[1, n_full]``."""
    return min(n_full, max(1, int(math.ceil(fraction * n_full - 1e-9))))


def noiseless_path(tau, c: float) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    return -c / np.log(tau)


def _draw_latent(cfg: SimConfig, rng: np.random.Generator):
    while True:
        c = rng.normal(cfg.c_mean, cfg.c_sd)
        eps = rng.normal(0.0, cfg.ttf_noise_sd)
        if c <= 0:
            continue
        ttf = failure_time(c, eps, cfg.threshold_d)
        n_full = full_length(ttf, cfg.dt)
        if n_full >= 2 and ttf < 1.0:
            return c, ttf, n_full


def _asset_rng(seed, *key) -> np.random.Generator:
    entropy = seed.entropy if isinstance(seed, np.random.SeedSequence) else seed
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=tuple(key)))


def sample_asset(cfg: SimConfig, seed, fraction: Optional[float] = None) -> Asset:
    """Draw one asset.

    With ``fraction=None`` the asset is a training asset truncated at a
    ``Beta`` fraction of its life; otherwise it is cut at ``ceil(fraction * n)``.
    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    rng = np.random.default_rng(seed)
    c, ttf, n_full = _draw_latent(cfg, rng)
    tau = np.arange(1, n_full + 1) * cfg.dt
    signal = noiseless_path(tau, c) + rng.normal(0.0, cfg.obs_noise_sd, n_full)
    if fraction is None:
        z = rng.beta(*cfg.trunc_beta)
        n_keep = truncation_length(z, n_full)
    else:
        n_keep = truncation_length(fraction, n_full)
    return Asset(c=c, ttf=ttf, signal=signal[:n_keep], trunc_len=n_keep,
                 full_len=n_full, fraction=fraction)


def generate_population(cfg: SimConfig, seed: int) -> List[List[Asset]]:
    """Training population: ``n_users`` lists of assets, ``J_i ~ U{low..high}``."""
    cfg.validate()
    users = []
    for i in range(cfg.n_users):
        size_rng = _asset_rng(seed, _TRAIN_KEY, i)
        n_assets = int(size_rng.integers(cfg.samples_low, cfg.samples_high + 1))
        users.append([sample_asset(cfg, _asset_rng(seed, _TRAIN_KEY, i, j))
                      for j in range(n_assets)])
    return users


def generate_test_set(cfg: SimConfig, seed: int) -> List[Asset]:
    """``n_test`` assets spread evenly over ``cfg.test_fractions``."""
    cfg.validate()
    n_frac = len(cfg.test_fractions)
    if n_frac == 0 or cfg.n_test % n_frac:
        raise ConfigError(
            f"n_test={cfg.n_test} is not divisible by {n_frac} truncation fractions")
    per = cfg.n_test // n_frac
    out = []
    for f_idx, frac in enumerate(cfg.test_fractions):
        for k in range(per):
            idx = f_idx * per + k
            asset = sample_asset(cfg, _asset_rng(seed, _TEST_KEY, idx), fraction=frac)
            asset.meta["test_id"] = idx
            out.append(asset)
    return out


def export_population(users: Sequence[Sequence[Asset]], directory, dt: float = 0.001) -> None:
    """Write ``user_XXX.csv`` (asset_id, tau, value) and ``user_XXX_ttf.csv``."""
    os.makedirs(directory, exist_ok=True)
    for i, assets in enumerate(users):
        with open(os.path.join(directory, f"user_{i:03d}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset_id", "tau", "value"])
            for j, a in enumerate(assets):
                for t, v in enumerate(a.signal, start=1):
                    w.writerow([j, repr(round(t * dt, 12)), repr(float(v))])
        with open(os.path.join(directory, f"user_{i:03d}_ttf.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset_id", "ttf", "trunc_len"])
            for j, a in enumerate(assets):
                w.writerow([j, repr(float(a.ttf)), a.trunc_len])
