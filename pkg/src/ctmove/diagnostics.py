"""Posterior summaries and single-chain convergence checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.special import gammaln, kv

from .model import ModelError, RefinedPath

QUANTILES = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class SummaryTable:
    """Per-parameter 5%, 50% and 95% quantiles (one row per name)."""

    names: list[str]
    quantiles: np.ndarray

    def row(self, name: str) -> np.ndarray:
        return self.quantiles[self.names.index(name)]


def quantile_summary(samples: np.ndarray, names: Sequence[str] | None = None) -> SummaryTable:
    """Quantiles by linear interpolation between order statistics.

    ``samples`` is ``(n_draws,)`` or ``(n_draws, n_params)``.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 2:
        raise ModelError("need at least two samples")
    names = list(names) if names is not None else [f"p{k}" for k in range(arr.shape[1])]
    if len(names) != arr.shape[1]:
        raise ModelError("one name per column required")
    q = np.quantile(arr, QUANTILES, axis=0, method="linear").T
    return SummaryTable(names, q)


def autocorrelation(chain: np.ndarray) -> np.ndarray:
    """Sample autocorrelations at lags ``0..n-1`` (biased, FFT based)."""
    x = np.asarray(chain, dtype=float) - np.mean(chain)
    n = x.shape[0]
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(chain: np.ndarray) -> float:
    """``N / (1 + 2 sum rho_k)`` with the initial positive sequence truncation.

    Autocorrelations are summed in adjacent pairs until the first negative
    pair sum. A constant chain has ESS 1; the result never exceeds ``N``.
    """
    x = np.asarray(chain, dtype=float)
    n = x.shape[0]
    if n < 10:
        raise ModelError("chain too short for an ESS estimate")
    if np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)
    m = n // 2
    pairs = rho[0 : 2 * m : 2] + rho[1 : 2 * m : 2]
    neg = np.nonzero(pairs < 0)[0]
    stop = neg[0] if neg.size else m
    tau = -1.0 + 2.0 * float(np.sum(pairs[:stop]))
    return float(min(n, n / max(tau, 1e-12)))


def spectrum0_ar(chain: np.ndarray) -> float:
    """Spectral density at frequency zero from a Yule-Walker AR fit.

    The order is chosen by AIC up to ``min(n - 1, 10 log10 n)``.
    """
    x = np.asarray(chain, dtype=float)
    n = x.shape[0]
    x = x - x.mean()
    r = np.correlate(x, x, mode="full")[n - 1 :] / n
    if r[0] == 0:
        return 0.0
    max_order = int(min(n - 1, math.floor(10 * math.log10(n))))
    best = (n * math.log(r[0]), 0, np.empty(0), r[0])
    for p in range(1, max_order + 1):
        phi = solve_toeplitz(r[:p], r[1 : p + 1])
        var = r[0] - float(phi @ r[1 : p + 1])
        if var <= 0:
            break
        aic = n * math.log(var) + 2 * p
        if aic < best[0]:
            best = (aic, p, phi, var)
    _, p, phi, var = best
    var *= n / (n - (p + 1))
    return var / (1.0 - float(np.sum(phi))) ** 2


def pcramer(q: float, eps: float = 1e-5) -> float:
    """CDF of the asymptotic Cramér-von Mises statistic.

    The series has positive terms; summation stops once the exponent passes
    ``-log(eps)``, which needs more terms as ``q`` grows.
    """
    if q <= 0:
        return 0.0
    total = 0.0
    k = 0
    while True:
        u = (4 * k + 1) ** 2 / (16 * q)
        if u > -math.log(eps):
            break
        z = math.exp(gammaln(k + 0.5) - gammaln(k + 1)) * math.sqrt(4 * k + 1) / (
            math.pi**1.5 * math.sqrt(q)
        )
        total += z * math.exp(-u) * kv(0.25, u)
        k += 1
    return min(total, 1.0)


@dataclass(frozen=True)
class StationarityResult:
    stationary: bool
    start_fraction: float | None
    p_value: float


def heidelberger_welch(chain: np.ndarray, alpha: float = 0.05) -> StationarityResult:
    """Cramér-von Mises stationarity test on successively trimmed chains.

    Drops 0%, 10%, ..., 50% of the chain; the spectral density at zero is
    estimated once from the final half. Returns the first passing trim
    fraction, or ``stationary=False`` when every trim fails. The half-width
    test is not performed.
    """
    x = np.asarray(chain, dtype=float)
    n = x.shape[0]
    if n < 100:
        raise ModelError("chain too short for the stationarity test")
    s0 = spectrum0_ar(x[n // 2 :])
    p_value = 0.0
    for frac in np.arange(6) / 10:
        y = x[int(round(frac * n)) :]
        m = y.shape[0]
        if s0 <= 0:
            return StationarityResult(bool(np.ptp(y) == 0), float(frac) if np.ptp(y) == 0 else None, 1.0)
        bridge = np.cumsum(y) - y.mean() * np.arange(1, m + 1)
        stat = float(np.sum(bridge**2) / (m * m * s0))
        p_value = 1.0 - pcramer(stat)
        if p_value > alpha:
            return StationarityResult(True, float(frac), p_value)
    return StationarityResult(False, None, p_value)


@dataclass(frozen=True)
class StateProbabilitySeries:
    times: np.ndarray
    probabilities: np.ndarray

    def state(self, s: int) -> np.ndarray:
        return self.probabilities[:, s]


def states_at(path: RefinedPath, times: np.ndarray) -> np.ndarray:
    """Behaviour in force at each time (the last interval covers the end point)."""
    idx = np.searchsorted(path.times, times, side="right") - 1
    return path.behaviour[np.clip(idx, 0, path.n_intervals - 1)]


def state_probability_series(
    snapshots: Sequence[RefinedPath], times: np.ndarray, n_states: int = 2
) -> StateProbabilitySeries:
    """Fraction of snapshots in each state at every grid time."""
    if not snapshots:
        raise ModelError("need at least one path snapshot")
    times = np.asarray(times, dtype=float)
    counts = np.zeros((times.shape[0], n_states), dtype=np.int64)
    rows = np.arange(times.shape[0])
    for path in snapshots:
        if times.size and (times[0] < path.times[0] or times[-1] > path.times[-1]):
            raise ModelError("grid lies outside the path time span")
        np.add.at(counts, (rows, states_at(path, times)), 1)
    return StateProbabilitySeries(times, counts / len(snapshots))
