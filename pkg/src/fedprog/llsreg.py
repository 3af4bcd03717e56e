"""(Log-)location-scale regression fitted by (federated) gradient descent.

The model is ``y = x^T beta + sigma * eps`` with ``eps`` standard normal,
smallest-extreme-value (SEV) or logistic. With ``y = ln(ttf)`` these give
lognormal, Weibull and log-logistic failure times.

Parameters are reparameterized as ``sigma_t = 1 / sigma`` and
``beta_t = beta / sigma``, which makes the negative log-likelihood convex.
The parameter vector is ``theta = (sigma_t, beta_t_0, ..., beta_t_K)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np
from scipy.special import expit, log_expit, logit, ndtri

from .fedcore import DOWNLOAD, SERVER, UPLOAD, Federation, Message, Transcript, UserState, user_name

DISTRIBUTIONS = ("normal", "sev", "logistic")
_CODES = {name: k for k, name in enumerate(DISTRIBUTIONS)}
SIGMA_FLOOR = 1e-8
_EXP_CAP = 700.0


class DomainError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Theta:
    sigma_tilde: float
    beta_tilde: np.ndarray

    def __post_init__(self):
        if not self.sigma_tilde > 0:
            raise DomainError("sigma_tilde must be positive")

    @classmethod
    def from_vector(cls, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        return cls(float(vec[0]), vec[1:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.sigma_tilde], self.beta_tilde])

    @property
    def sigma(self) -> float:
        return 1.0 / self.sigma_tilde

    @property
    def beta(self) -> np.ndarray:
        return self.beta_tilde / self.sigma_tilde


@dataclass(frozen=True)
class GdConfig:
    """Gradient-descent settings. ``alpha=None`` means ``1e-3 / n_samples``."""

    alpha: Optional[float] = None
    delta: float = 1e-8
    max_iters: int = 100_000
    init_seed: int = 0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.delta <= 0 or self.max_iters < 1:
            raise ValueError("need delta > 0 and max_iters >= 1")

    def step_size(self, n_samples: int) -> float:
        return self.alpha if self.alpha is not None else 1e-3 / max(n_samples, 1)


@dataclass
class FitResult:
    theta_star: Theta
    iterations: int
    converged: bool
    final_step_norm: float
    n_clamped: int = 0
    final_nll: float = float("nan")
    path: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "theta": self.theta_star.as_vector().tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_step_norm": self.final_step_norm,
            "n_clamped": self.n_clamped,
        })


def _unpack(x, y, theta, dist):
    if dist not in _CODES:
        raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    vec = theta.as_vector() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)
    if x.shape[0] != y.shape[0] or x.shape[1] + 1 != vec.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}, theta {vec.shape}")
    if not vec[0] > 0:
        raise DomainError(f"sigma_tilde must be positive, got {vec[0]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("responses must be finite")
    z = vec[0] * y - x @ vec[1:]
    return x, y, vec, z


def nll_local(x, y, theta, dist: str) -> float:
    """Negative log-likelihood (up to a constant) of one user's data."""
    x, y, vec, z = _unpack(x, y, theta, dist)
    n = y.shape[0]
    base = -n * math.log(vec[0])
    if dist == "normal":
        return float(base + 0.5 * np.sum(z * z))
    if dist == "sev":
        return float(base - np.sum(z) + np.sum(np.exp(np.minimum(z, _EXP_CAP))))
    return float(base - np.sum(z) + 2.0 * np.sum(np.logaddexp(0.0, z)))


def grad_local(x, y, theta, dist: str) -> np.ndarray:
    """Gradient ``(d/d sigma_t, d/d beta_t)`` of :func:`nll_local`."""
    x, y, vec, z = _unpack(x, y, theta, dist)
    n = y.shape[0]
    if dist == "normal":
        c_sigma, c_beta = z, -z
    elif dist == "sev":
        one_minus = 1.0 - np.exp(np.minimum(z, _EXP_CAP))
        c_sigma, c_beta = -one_minus, one_minus
    else:
        p = expit(z)
        c_sigma, c_beta = 2.0 * p - 1.0, 1.0 - 2.0 * p
    return np.concatenate([[-n / vec[0] + c_sigma @ y], c_beta @ x])


def hessian_local(x, y, theta, dist: str) -> np.ndarray:
    x, y, vec, z = _unpack(x, y, theta, dist)
    n = y.shape[0]
    if dist == "normal":
        w = np.ones_like(z)
    elif dist == "sev":
        w = np.exp(np.minimum(z, _EXP_CAP))
    else:
        # 2 e^z / (1 + e^z)^2 written without overflow
        w = 2.0 * np.exp(log_expit(z) + log_expit(-z))
    p = x.shape[1] + 1
    h = np.empty((p, p))
    h[0, 0] = n / vec[0] ** 2 + np.sum(w * y * y)
    cross = -(w * y) @ x
    h[0, 1:] = cross
    h[1:, 0] = cross
    h[1:, 1:] = (x * w[:, None]).T @ x
    return h


def predict_ttf(x_new, theta, dist: str, p: float = 0.5) -> float:
    """``p``-quantile of the failure time, ``exp(location + scale * Q(p))``."""
    if not 0 < p < 1:
        raise DomainError("p must lie in (0, 1)")
    vec = theta.as_vector() if isinstance(theta, Theta) else np.asarray(theta, dtype=float)
    x_new = np.asarray(x_new, dtype=float).ravel()
    loc = float(x_new @ vec[1:]) / vec[0]
    scale = 1.0 / vec[0]
    if dist == "normal":
        quant = float(ndtri(p))
    elif dist == "sev":
        quant = math.log(-math.log1p(-p))
    elif dist == "logistic":
        quant = float(logit(p))
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return math.exp(loc + scale * quant)


# --- gradient descent kernels ----------------------------------------------

@numba.njit(cache=True)
def _accumulate(x, y, start, stop, theta, dist, g):
    p = theta.shape[0]
    st = theta[0]
    n = stop - start
    nll = -n * math.log(st)
    g[0] += -n / st
    for j in range(start, stop):
        z = st * y[j]
        for k in range(p - 1):
            z -= x[j, k] * theta[k + 1]
        if dist == 0:
            nll += 0.5 * z * z
            c_sigma = z
            c_beta = -z
        elif dist == 1:
            ez = math.exp(min(z, 700.0))
            nll += ez - z
            c_sigma = ez - 1.0
            c_beta = 1.0 - ez
        else:
            if z >= 0:
                e = math.exp(-z)
                pz = 1.0 / (1.0 + e)
                softplus = z + math.log1p(e)
            else:
                e = math.exp(z)
                pz = e / (1.0 + e)
                softplus = math.log1p(e)
            nll += 2.0 * softplus - z
            c_sigma = 2.0 * pz - 1.0
            c_beta = 1.0 - 2.0 * pz
        g[0] += c_sigma * y[j]
        for k in range(p - 1):
            g[k + 1] += c_beta * x[j, k]
    return nll


@numba.njit(cache=True)
def _gd_kernel(x, y, offsets, theta0, alpha, delta, max_iters, dist, patience, path):
    p = theta0.shape[0]
    theta = theta0.copy()
    total = np.zeros(p)
    local = np.zeros(p)
    new = np.zeros(p)
    prev_nll = np.inf
    streak = 0
    clamps = 0
    it = 0
    step = np.inf
    status = 0  # 0 max iters, 1 converged, 2 diverged
    record = path.shape[0] > 0
    if record:
        path[0, :] = theta
    while it < max_iters:
        total[:] = 0.0
        nll = 0.0
        for u in range(offsets.shape[0] - 1):
            local[:] = 0.0
            nll += _accumulate(x, y, offsets[u], offsets[u + 1], theta, dist, local)
            for k in range(p):
                total[k] += local[k]
        finite = math.isfinite(nll)
        for k in range(p):
            finite = finite and math.isfinite(total[k])
        if not finite:
            status = 2
            break
        if nll > prev_nll:
            streak += 1
        else:
            streak = 0
        if streak >= patience:
            status = 2
            break
        prev_nll = nll
        acc = 0.0
        for k in range(p):
            new[k] = theta[k] - alpha * total[k]
        if new[0] <= 0.0:
            new[0] = 1e-8
            clamps += 1
        for k in range(p):
            d = new[k] - theta[k]
            acc += d * d
            theta[k] = new[k]
        step = math.sqrt(acc)
        it += 1
        if record:
            path[it, :] = theta
        if step < delta:
            status = 1
            break
    return theta, it, status, step, clamps, prev_nll


def initial_theta(n_params: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, n_params)


def _stack_parts(parts):
    xs, ys = [], []
    for x, y in parts:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError("each user's x and y must have the same number of rows")
        xs.append(x)
        ys.append(y)
    widths = {x.shape[1] for x in xs}
    if len(widths) != 1:
        raise ValueError(f"users disagree on feature dimension: {sorted(widths)}")
    offsets = np.cumsum([0] + [len(y) for y in ys]).astype(np.int64)
    return np.ascontiguousarray(np.vstack(xs)), np.concatenate(ys), offsets


def _run_kernel(x, y, offsets, cfg: GdConfig, dist: str, return_path: bool) -> FitResult:
    if dist not in _CODES:
        raise ValueError(f"unknown distribution {dist!r}")
    n_params = x.shape[1] + 1
    theta0 = initial_theta(n_params, cfg.init_seed)
    path = np.zeros((cfg.max_iters + 1, n_params) if return_path else (0, n_params))
    alpha = cfg.step_size(int(offsets[-1]))
    theta, it, status, step, clamps, nll = _gd_kernel(
        x, y, offsets, theta0, alpha, cfg.delta, cfg.max_iters, _CODES[dist],
        cfg.divergence_patience, path)
    if status == 2:
        raise DivergenceError(
            f"gradient descent diverged after {it} iterations (alpha={alpha:g}); "
            "try a smaller learning rate")
    return FitResult(Theta.from_vector(theta), int(it), status == 1, float(step), int(clamps),
                     float(nll), path[: it + 1].copy() if return_path else None)


def centralized_fit(x, y, cfg: GdConfig, dist: str, return_path: bool = False) -> FitResult:
    """Plain gradient descent on pooled data."""
    xs, ys, offsets = _stack_parts([(x, y)])
    return _run_kernel(xs, ys, offsets, cfg, dist, return_path)


def federated_fit(parts: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: GdConfig, dist: str, *,
                  user_ids: Optional[Sequence[int]] = None, engine: str = "fast",
                  return_path: bool = False,
                  transcript: Optional[Transcript] = None) -> Tuple[FitResult, Transcript]:
    """Federated gradient descent over per-user ``(x_i, y_i)`` parts.

    Each round every user downloads ``theta``, uploads its local gradient and
    the server applies ``theta -= alpha * sum_i grad_i`` (summed in user order).

    ``engine="protocol"`` runs every round through :class:`Federation`;
    ``engine="fast"`` evaluates the same per-user gradients in a compiled loop
    and records the (identical) rounds compactly. The objective value used for
    divergence detection is a coordinator-side diagnostic and is not metered.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("no participating users")
    user_ids = list(range(len(parts))) if user_ids is None else list(user_ids)
    order = np.argsort(user_ids, kind="stable")
    parts = [parts[k] for k in order]
    user_ids = [user_ids[k] for k in order]
    x, y, offsets = _stack_parts(parts)
    n_params = x.shape[1] + 1
    transcript = transcript if transcript is not None else Transcript()
    transcript.meta["n_params"] = n_params
    fed = Federation([UserState(uid, x[offsets[k]:offsets[k + 1]], y[offsets[k]:offsets[k + 1]])
                      for k, uid in enumerate(user_ids)], transcript, keep_payloads=False)

    if engine == "fast":
        result = _run_kernel(x, y, offsets, cfg, dist, return_path)
        fed.record_repeated(result.iterations, [
            t for uid in user_ids for t in (
                (DOWNLOAD, SERVER, user_name(uid), "theta", (n_params,)),
                (UPLOAD, user_name(uid), SERVER, "grad_i", (n_params,)))])
    elif engine == "protocol":
        result = _protocol_fit(fed, cfg, dist, return_path)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    fed.broadcast_only({"theta*": Message(result.theta_star.as_vector())})
    return result, transcript


def _protocol_fit(fed: Federation, cfg: GdConfig, dist: str, return_path: bool) -> FitResult:
    n_samples = sum(u.n_samples for u in fed.users.values())
    n_params = next(iter(fed.users.values())).signals.shape[1] + 1
    alpha = cfg.step_size(n_samples)
    theta = initial_theta(n_params, cfg.init_seed)
    path: List[np.ndarray] = [theta.copy()]
    prev_nll, streak, clamps, step, it, converged = np.inf, 0, 0, np.inf, 0, False

    def local_grad(state, th):
        return grad_local(state.signals, state.ttfs, th, dist)

    def add_in_order(uploads):
        total = np.zeros(n_params)
        for _, g in uploads:
            total += g
        return total

    while it < cfg.max_iters:
        grad = fed.run_round(theta, local_grad, add_in_order, down_label="theta", up_label="grad_i")
        nll = sum(nll_local(u.signals, u.ttfs, theta, dist) for u in fed.users.values())
        streak = streak + 1 if nll > prev_nll else 0
        if not np.isfinite(nll) or streak >= cfg.divergence_patience:
            raise DivergenceError(
                f"gradient descent diverged after {it} iterations; try a smaller learning rate")
        prev_nll = nll
        new = theta - alpha * grad
        if new[0] <= 0:
            new[0] = SIGMA_FLOOR
            clamps += 1
        step = float(np.linalg.norm(new - theta))
        theta = new
        it += 1
        if return_path:
            path.append(theta.copy())
        if step < cfg.delta:
            converged = True
            break
    return FitResult(Theta.from_vector(theta), it, converged, step, clamps, float(prev_nll),
                     np.array(path) if return_path else None)
