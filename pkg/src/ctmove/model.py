"""Multistate bearing/speed movement model.

Bearing follows Brownian motion with per-state volatility, speed follows an
Ornstein-Uhlenbeck process with per-state mean, reversion rate and volatility,
and the behavioural state is a continuous-time Markov chain. Movement is
discretised on a refined time grid that contains every behavioural switch;
locations are the cumulative sums of ``step * (cos bearing, sin bearing)``.

Units are hours and metres throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Raised for invalid model inputs or degenerate densities."""


@dataclass(frozen=True)
class MovementParams:
    """Movement parameters of one behavioural state.

    Attributes:
        sigma_theta_sq: Turn volatility, rad^2/hour.
        mu: Long-term mean speed, metres/hour.
        beta: Speed mean-reversion rate, 1/hour.
        sigma_psi_sq: Speed volatility, m^2/hour^3.
    """

    sigma_theta_sq: float
    mu: float
    beta: float
    sigma_psi_sq: float

    def __post_init__(self):
        for name in ("sigma_theta_sq", "mu", "beta", "sigma_psi_sq"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ModelError(f"{name} must be positive and finite, got {value!r}")

    @property
    def speed_variance(self) -> float:
        """Long-term variance of the speed process."""
        return self.sigma_psi_sq / (2.0 * self.beta)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sigma_theta_sq, self.mu, self.beta, self.sigma_psi_sq)


@dataclass(frozen=True)
class BehaviourParams:
    """Switching rates ``lam`` and switch probabilities ``q`` of the behaviour chain."""

    lam: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "q", q)
        n = lam.shape[0]
        if lam.ndim != 1 or n < 2:
            raise ModelError("need at least two behavioural states")
        if q.shape != (n, n):
            raise ModelError(f"q must be {n}x{n}, got {q.shape}")
        # ndarray methods keep this cheap; it runs once per Gibbs draw
        if not (lam.min() > 0 and lam.max() < math.inf):
            raise ModelError("switching rates must be positive and finite")
        if q.diagonal().any() or not q.min() >= 0:
            raise ModelError("q must be non-negative with a zero diagonal")
        if not abs(q.sum(axis=1) - 1.0).max() <= 1e-12:
            raise ModelError("rows of q must sum to one")

    @property
    def n_states(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def two_state(cls, lam1: float, lam2: float) -> "BehaviourParams":
        return cls(np.array([lam1, lam2]), np.array([[0.0, 1.0], [1.0, 0.0]]))

    def generator(self) -> np.ndarray:
        """Rate matrix with off-diagonals ``lam_i * q_ij``."""
        gen = self.lam[:, None] * self.q
        np.fill_diagonal(gen, -self.lam)
        return gen


@dataclass(frozen=True)
class Parameters:
    behaviour: BehaviourParams
    movement: tuple[MovementParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "movement", tuple(self.movement))
        if len(self.movement) != self.behaviour.n_states:
            raise ModelError(
                f"{len(self.movement)} movement parameter sets for "
                f"{self.behaviour.n_states} states"
            )

    @property
    def n_states(self) -> int:
        return self.behaviour.n_states

    @cached_property
    def arrays(self) -> "MovementArrays":
        stacked = np.array([m.as_tuple() for m in self.movement])
        return MovementArrays(*stacked.T)

    def with_movement(self, movement: Sequence[MovementParams]) -> "Parameters":
        return Parameters(self.behaviour, tuple(movement))

    def with_behaviour(self, behaviour: BehaviourParams) -> "Parameters":
        return Parameters(behaviour, self.movement)


@dataclass(frozen=True)
class MovementArrays:
    """Per-state movement parameters as arrays indexed by state."""

    sigma_theta_sq: np.ndarray
    mu: np.ndarray
    beta: np.ndarray
    sigma_psi_sq: np.ndarray

    @property
    def speed_variance(self) -> np.ndarray:
        return self.sigma_psi_sq / (2.0 * self.beta)


@dataclass(frozen=True)
class BehaviourTrajectory:
    """Piecewise-constant behaviour on ``[start_time, end_time]``.

    ``entry_times[k]`` is the time the chain entered ``states[k]``.
    """

    start_time: float
    end_time: float
    entry_times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        entry = np.asarray(self.entry_times, dtype=float)
        states = np.asarray(self.states, dtype=np.int64)
        object.__setattr__(self, "entry_times", entry)
        object.__setattr__(self, "states", states)
        if entry.shape != states.shape or entry.size == 0:
            raise ModelError("entry_times and states must be non-empty and aligned")
        if entry[0] != self.start_time:
            raise ModelError("first segment must start at start_time")
        if np.any(np.diff(entry) <= 0) or entry[-1] >= self.end_time:
            raise ModelError("entry times must increase and lie before end_time")
        if np.any(states[1:] == states[:-1]):
            raise ModelError("consecutive segments must change state")

    @property
    def switch_times(self) -> np.ndarray:
        return self.entry_times[1:]

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    def state_at(self, t) -> np.ndarray:
        """State holding at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(self.entry_times, t, side="right") - 1
        return self.states[np.clip(idx, 0, None)]

    @property
    def segments(self) -> list[tuple[float, int]]:
        return list(zip(self.entry_times.tolist(), self.states.tolist()))


@dataclass(frozen=True)
class RefinedPath:
    """Discretised path on the grid ``times[0..N]``.

    Interval ``i`` is ``[times[i], times[i+1])`` with behaviour ``behaviour[i]``,
    bearing ``bearings[i]`` (unwrapped) and step ``steps[i]``.
    """

    times: np.ndarray
    behaviour: np.ndarray
    bearings: np.ndarray
    steps: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "behaviour", np.asarray(self.behaviour, dtype=np.int64))
        object.__setattr__(self, "bearings", np.asarray(self.bearings, dtype=float))
        object.__setattr__(self, "steps", np.asarray(self.steps, dtype=float))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))
        n = self.times.shape[0] - 1
        if n < 1:
            raise ModelError("a refined path needs at least one interval")
        if not (self.behaviour.shape == self.bearings.shape == self.steps.shape == (n,)):
            raise ModelError("behaviour, bearings and steps must have one entry per interval")
        if np.any(np.diff(self.times) <= 0):
            raise ModelError("refined times must be strictly increasing")

    @property
    def n_intervals(self) -> int:
        return self.steps.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def speeds(self) -> np.ndarray:
        return self.steps / self.dt

    def locations(self) -> np.ndarray:
        return integrate_locations(self.origin, self.bearings, self.steps)

    def switch_times(self) -> np.ndarray:
        change = np.nonzero(self.behaviour[1:] != self.behaviour[:-1])[0] + 1
        return self.times[change]

    def trajectory(self) -> BehaviourTrajectory:
        change = np.concatenate([[0], np.nonzero(self.behaviour[1:] != self.behaviour[:-1])[0] + 1])
        return BehaviourTrajectory(
            float(self.times[0]), float(self.times[-1]), self.times[change], self.behaviour[change]
        )

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.behaviour[np.clip(idx, 0, self.n_intervals - 1)]


@dataclass(frozen=True)
class ObservationSeries:
    """Error-free 2-D locations (metres) at strictly increasing times (hours)."""

    times: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        locs = np.asarray(self.locations, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "locations", locs)
        if times.ndim != 1 or locs.shape != (times.shape[0], 2):
            raise ModelError("locations must be an (n, 2) array aligned with times")
        if times.shape[0] < 3:
            raise ModelError("need at least three observations")
        if np.any(np.diff(times) <= 0):
            raise ModelError("observation times must be strictly increasing")

    def __len__(self):
        return self.times.shape[0]


def ctmc_stationary(behaviour: BehaviourParams) -> np.ndarray:
    """Stationary distribution of the behaviour chain.

    Raises:
        ModelError: if the chain is reducible.
    """
    n = behaviour.n_states
    n_comp, _ = connected_components(behaviour.q > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise ModelError("behaviour chain is reducible; no unique stationary distribution")
    if n == 2:
        lam = behaviour.lam
        return np.array([lam[1], lam[0]]) / (lam[0] + lam[1])
    gen = behaviour.generator()
    # pi Q = 0 with the normalisation replacing one redundant balance equation
    lhs = np.vstack([gen.T[:-1], np.ones(n)])
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(lhs, rhs)
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def simulate_behaviour(
    behaviour: BehaviourParams,
    t0: float,
    t1: float,
    s0: int,
    rng: np.random.Generator,
) -> BehaviourTrajectory:
    """Forward-simulate the behaviour chain from state ``s0`` on ``[t0, t1]``."""
    if not t0 < t1:
        raise ModelError("need t0 < t1")
    lam = behaviour.lam
    q = behaviour.q
    n = lam.shape[0]
    entry = [t0]
    states = [int(s0)]
    t = t0
    s = int(s0)
    while True:
        t += rng.exponential(1.0 / lam[s])
        if t >= t1:
            break
        s = int(rng.choice(n, p=q[s])) if n > 2 else 1 - s
        entry.append(t)
        states.append(s)
    return BehaviourTrajectory(t0, t1, np.array(entry), np.array(states))


def build_refined_times(
    trajectory: BehaviourTrajectory,
    delta_t: float,
    knots: Sequence[float] = (),
) -> np.ndarray:
    """Refined grid through the trajectory's end points, switch times and ``knots``.

    Every span between consecutive breakpoints is split into
    ``ceil(span / delta_t)`` equal pieces.
    """
    if not delta_t > 0:
        raise ModelError("delta_t must be positive")
    t0, t1 = trajectory.start_time, trajectory.end_time
    breaks = np.concatenate([[t0], trajectory.switch_times, np.asarray(knots, dtype=float), [t1]])
    breaks = np.unique(breaks[(breaks >= t0) & (breaks <= t1)])
    # merge breakpoints closer than floating noise, keeping switch/knot values exact
    tol = 1e-9 * max(1.0, abs(t1))
    if breaks.size > 2:
        keep = np.concatenate([[True], np.diff(breaks) > tol])
        breaks = breaks[keep]
        breaks[-1] = t1
    spans = np.diff(breaks)
    counts = np.maximum(np.ceil(spans / delta_t - 1e-9), 1).astype(np.int64)
    if np.all(counts == 1):
        return breaks
    pieces = [
        breaks[k] + spans[k] * np.arange(counts[k]) / counts[k] for k in range(spans.size)
    ]
    pieces.append(breaks[-1:])
    return np.concatenate(pieces)


def interval_states(trajectory: BehaviourTrajectory, times: np.ndarray) -> np.ndarray:
    """Behaviour of each refined interval ``[times[i], times[i+1])``."""
    return trajectory.state_at(0.5 * (times[:-1] + times[1:]))


def ou_transition(psi, mu, beta, sigma_psi_sq, dt):
    """Mean and variance of the exact OU transition over ``dt``."""
    decay = np.exp(-beta * dt)
    mean = mu + decay * (psi - mu)
    var = sigma_psi_sq * (-np.expm1(-2.0 * beta * dt)) / (2.0 * beta)
    return mean, var


def simulate_movement_increment(
    theta: float,
    psi: float,
    state: int,
    delta_t: float,
    params: Parameters,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Advance bearing and speed by ``delta_t`` within behavioural ``state``."""
    if not delta_t > 0:
        raise ModelError("delta_t must be positive")
    m = params.movement[state]
    theta_new = theta + math.sqrt(m.sigma_theta_sq * delta_t) * rng.standard_normal()
    mean, var = ou_transition(psi, m.mu, m.beta, m.sigma_psi_sq, delta_t)
    psi_new = mean + math.sqrt(var) * rng.standard_normal()
    return theta_new, float(psi_new)


def integrate_locations(origin, bearings, steps) -> np.ndarray:
    """Locations at the refined times: ``origin`` plus cumulative step vectors."""
    bearings = np.asarray(bearings, dtype=float)
    steps = np.asarray(steps, dtype=float)
    if bearings.shape != steps.shape:
        raise ModelError("bearings and steps must have the same length")
    out = np.empty((steps.shape[0] + 1, 2))
    out[0] = origin
    out[1:, 0] = steps * np.cos(bearings)
    out[1:, 1] = steps * np.sin(bearings)
    return np.cumsum(out, axis=0)


def simulate_path(
    params: Parameters,
    t0: float,
    t1: float,
    delta_t: float,
    initial: tuple[int, float, float],
    rng: np.random.Generator,
    origin=(0.0, 0.0),
    knots: Sequence[float] = (),
) -> RefinedPath:
    """Simulate a refined path on ``[t0, t1]``.

    Args:
        initial: ``(state, bearing, speed)`` at ``t0``.
        knots: extra times forced onto the grid, e.g. an observation schedule.
    """
    state0, theta, psi = initial
    trajectory = simulate_behaviour(params.behaviour, t0, t1, state0, rng)
    times = build_refined_times(trajectory, delta_t, knots)
    states = interval_states(trajectory, times)
    dts = np.diff(times)
    n = dts.shape[0]
    bearings = np.empty(n)
    steps = np.empty(n)
    for i in range(n):
        bearings[i] = theta
        steps[i] = psi * dts[i]
        if i + 1 < n:
            theta, psi = simulate_movement_increment(theta, psi, states[i], dts[i], params, rng)
    return RefinedPath(times, states, bearings, steps, np.asarray(origin, dtype=float))


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def bearing_log_density(params: Parameters, path: RefinedPath) -> float:
    """Log density of the bearings: uniform start, Gaussian increments."""
    arr = params.arrays
    dts = path.dt
    var = arr.sigma_theta_sq[path.behaviour[:-1]] * dts[:-1]
    inc = np.diff(path.bearings)
    return -LOG_2PI + float(np.sum(normal_logpdf(inc, 0.0, var)))


def initial_speed_log_density(params: Parameters, psi0: float) -> float:
    """Stationary-weighted mixture of the per-state OU equilibria at ``psi0``."""
    arr = params.arrays
    weights = ctmc_stationary(params.behaviour)
    comps = normal_logpdf(psi0, arr.mu, arr.speed_variance)
    with np.errstate(divide="ignore"):
        return float(np.logaddexp.reduce(np.log(weights) + comps))


def step_log_density(params: Parameters, path: RefinedPath) -> float:
    """Log density of the steps, including the ``1/dt`` Jacobians."""
    arr = params.arrays
    dts = path.dt
    psi = path.steps / dts
    s = path.behaviour[:-1]
    mean, var = ou_transition(psi[:-1], arr.mu[s], arr.beta[s], arr.sigma_psi_sq[s], dts[:-1])
    trans = np.sum(normal_logpdf(psi[1:], mean, var))
    jac = -np.sum(np.log(dts))
    return initial_speed_log_density(params, psi[0]) + float(trans) + float(jac)


def path_log_density(params: Parameters, path: RefinedPath) -> float:
    """Log density of the path's bearings and steps given its behaviour.

    The behaviour trajectory's own density is not included.

    Raises:
        ModelError: if the density is not finite.
    """
    value = bearing_log_density(params, path) + step_log_density(params, path)
    if not math.isfinite(value):
        raise ModelError(f"non-finite path log density ({value})")
    return value
