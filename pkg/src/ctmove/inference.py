"""Conditional updates of the hybrid sampler.

Behaviour parameters are drawn from their conjugate gamma/Dirichlet full
conditional, movement parameters by a joint truncated-normal random walk, and
the latent path section by section with an independence proposal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from .bridges import SectionFixture, propose_section, section_log_weight
from .model import (
    BehaviourParams,
    ModelError,
    MovementParams,
    Parameters,
    RefinedPath,
    integrate_locations,
    path_log_density,
)

MOVEMENT_FIELDS = ("sigma_theta_sq", "mu", "beta", "sigma_psi_sq")


@dataclass(frozen=True)
class SufficientStats:
    """Occupancy times ``a[i]`` (hours) and transition counts ``b[i, j]``."""

    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class NormalPrior:
    """Normal prior truncated to the positive half-line."""

    mean: float
    sd: float

    def logpdf(self, x: float) -> float:
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2 * math.pi) - float(
            log_ndtr(self.mean / self.sd)
        )


@dataclass(frozen=True)
class PriorSpec:
    """Priors for all parameters.

    ``movement`` maps ``(state, field)`` to a :class:`NormalPrior`; parameters
    without an entry have a flat prior on the positive half-line. ``r_max``
    bounds ``sqrt(sigma_psi_sq / 2 beta) / mu`` in every state.
    """

    gamma_shape: np.ndarray
    gamma_rate: np.ndarray
    dirichlet: np.ndarray
    movement: dict = field(default_factory=dict)
    r_max: float = 1.0

    def __post_init__(self):
        for name in ("gamma_shape", "gamma_rate", "dirichlet"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.gamma_shape <= 0) or np.any(self.gamma_rate <= 0):
            raise ModelError("gamma hyperparameters must be positive")
        off = ~np.eye(self.dirichlet.shape[0], dtype=bool)
        if np.any(self.dirichlet[off] <= 0):
            raise ModelError("Dirichlet weights must be positive")
        if not self.r_max > 0:
            raise ModelError("r_max must be positive")

    @property
    def n_states(self) -> int:
        return self.gamma_shape.shape[0]

    @classmethod
    def default(cls, n_states: int = 2, r_max: float = 1.0) -> "PriorSpec":
        """Gamma(shape 0.1, rate 4) switching rates, unit Dirichlet rows, and a
        Normal(0.05, 0.1) turn-volatility prior on the last ('travelling') state."""
        movement = {(n_states - 1, "sigma_theta_sq"): NormalPrior(0.05, 0.1)}
        dirichlet = np.ones((n_states, n_states))
        np.fill_diagonal(dirichlet, 0.0)
        return cls(
            np.full(n_states, 0.1), np.full(n_states, 4.0), dirichlet, movement, r_max
        )


@dataclass(frozen=True)
class SamplerConfig:
    n_iter: int
    thin: int = 1
    burn_in_fraction: float = 0.25
    path_updates_per_iter: int = 100
    section_length_range: tuple[int, int] = (4, 24)
    delta_t: float = 2.0
    rw_proposal_sd: Optional[np.ndarray] = None
    rw_scale: float = 0.05
    path_store_stride: int = 10
    speed_threshold: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.n_iter <= 0 or self.thin <= 0 or self.path_store_stride <= 0:
            raise ModelError("n_iter, thin and path_store_stride must be positive")
        lo, hi = self.section_length_range
        if lo < 2 or hi < lo:
            raise ModelError("section lengths must be at least 2 and ordered")
        if not self.delta_t > 0:
            raise ModelError("delta_t must be positive")
        if not 0 <= self.burn_in_fraction < 1:
            raise ModelError("burn_in_fraction must lie in [0, 1)")


def behaviour_sufficient_stats(path: RefinedPath, n_states: int) -> SufficientStats:
    occupancy = np.bincount(path.behaviour, weights=path.dt, minlength=n_states)
    counts = np.zeros((n_states, n_states))
    frm = path.behaviour[:-1]
    to = path.behaviour[1:]
    moved = frm != to
    np.add.at(counts, (frm[moved], to[moved]), 1.0)
    return SufficientStats(occupancy, counts)


def gibbs_behaviour(
    stats: SufficientStats, priors: PriorSpec, rng: np.random.Generator
) -> BehaviourParams:
    """Exact draw from the conjugate full conditional of rates and switch probabilities."""
    n = stats.a.shape[0]
    shape = priors.gamma_shape + stats.b.sum(axis=1)
    rate = priors.gamma_rate + stats.a
    lam = rng.gamma(shape, 1.0 / rate)
    q = np.zeros((n, n))
    if n == 2:
        q[0, 1] = q[1, 0] = 1.0
    else:
        for i in range(n):
            others = [j for j in range(n) if j != i]
            q[i, others] = rng.dirichlet(priors.dirichlet[i, others] + stats.b[i, others])
    return BehaviourParams(lam, q)


def ratio_bound_ok(movement: Sequence[MovementParams], r_max: float) -> bool:
    return all(math.sqrt(m.speed_variance) / m.mu <= r_max for m in movement)


def movement_log_prior(movement: Sequence[MovementParams], priors: PriorSpec) -> float:
    """Unnormalised log prior; ``-inf`` when the speed-ratio bound is violated."""
    if not ratio_bound_ok(movement, priors.r_max):
        return -math.inf
    total = 0.0
    for (state, name), prior in priors.movement.items():
        total += prior.logpdf(getattr(movement[state], name))
    return total


def movement_vector(movement: Sequence[MovementParams]) -> np.ndarray:
    return np.array([m.as_tuple() for m in movement]).reshape(-1)


def movement_from_vector(vec: np.ndarray) -> tuple[MovementParams, ...]:
    return tuple(MovementParams(*map(float, row)) for row in np.reshape(vec, (-1, 4)))


def truncated_rw_proposal(current: np.ndarray, sd: np.ndarray, rng) -> np.ndarray:
    """Independent normal steps around ``current``, truncated below at zero."""
    out = current + sd * rng.standard_normal(current.shape[0])
    bad = out <= 0
    while np.any(bad):
        out[bad] = current[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
        bad = out <= 0
    return out


def mh_movement_update(
    params: Parameters,
    path: RefinedPath,
    priors: PriorSpec,
    rw_sd: np.ndarray,
    rng: np.random.Generator,
    current_log_post: Optional[float] = None,
) -> tuple[Parameters, bool, float]:
    """One joint random-walk update of every movement parameter.

    Returns ``(params, accepted, log_posterior)`` where the log posterior is the
    movement prior plus path log density at the returned parameters.
    """
    if current_log_post is None:
        current_log_post = movement_log_prior(params.movement, priors) + path_log_density(
            params, path
        )
    cur = movement_vector(params.movement)
    sd = np.asarray(rw_sd, dtype=float)
    prop = truncated_rw_proposal(cur, sd, rng)
    movement = movement_from_vector(prop)
    log_prior = movement_log_prior(movement, priors)
    if log_prior == -math.inf:
        return params, False, current_log_post
    candidate = params.with_movement(movement)
    try:
        log_post = log_prior + path_log_density(candidate, path)
    except ModelError:
        return params, False, current_log_post
    # q(cur | prop) / q(prop | cur) for the zero-truncated random walk
    moving = sd > 0
    hastings = float(np.sum(log_ndtr(cur[moving] / sd[moving]) - log_ndtr(prop[moving] / sd[moving])))
    log_ratio = log_post - current_log_post + hastings
    if log_ratio >= 0 or rng.random() < math.exp(log_ratio):
        return candidate, True, log_post
    return params, False, current_log_post


@dataclass(frozen=True)
class Section:
    start: int
    end: int
    fixture: SectionFixture

    @property
    def length(self) -> int:
        return self.end - self.start


def nominal_grid(obs_times: np.ndarray, delta_t: float) -> np.ndarray:
    """Grid through every observation time with gaps of at most ``delta_t``."""
    gaps = np.diff(obs_times)
    counts = np.maximum(np.ceil(gaps / delta_t - 1e-9), 1).astype(np.int64)
    pieces = [obs_times[k] + gaps[k] * np.arange(counts[k]) / counts[k] for k in range(gaps.size)]
    pieces.append(obs_times[-1:])
    return np.concatenate(pieces)


def grid_indices(path: RefinedPath, times: np.ndarray) -> np.ndarray:
    """Indices of ``times`` in the path grid, which must contain them."""
    times = np.asarray(times, dtype=float)
    tol = 1e-9 * max(1.0, abs(path.times[-1]))
    idx = np.clip(np.searchsorted(path.times, times - tol), 0, path.times.shape[0] - 1)
    if np.any(np.abs(path.times[idx] - times) > tol):
        raise ModelError("times must be refined grid points")
    return idx


def observation_indices(path: RefinedPath, obs_times: np.ndarray) -> np.ndarray:
    return grid_indices(path, obs_times)


def _location_at(path: RefinedPath, k: int, obs_times, obs_locations) -> np.ndarray:
    """Location at grid point ``k``, integrated from the last observation before it."""
    t = path.times[k]
    j = int(np.searchsorted(obs_times, t + 1e-9 * max(1.0, abs(path.times[-1])), side="right")) - 1
    if j < 0:
        base, i0 = path.origin, 0
    else:
        base, i0 = obs_locations[j], int(grid_indices(path, obs_times[j : j + 1])[0])
    th, nu = path.bearings[i0:k], path.steps[i0:k]
    return base + np.array([np.dot(nu, np.cos(th)), np.dot(nu, np.sin(th))])


def make_fixture(
    path: RefinedPath,
    start: int,
    end: int,
    obs_times: np.ndarray,
    obs_locations: np.ndarray,
    anchors: np.ndarray = np.empty(0),
) -> SectionFixture:
    """Fixture for the section ``path.times[start]..path.times[end]``.

    End locations come from the current path, observations strictly inside
    become knots and ``anchors`` strictly inside (other than observations)
    stay on the proposed grid.
    """
    n = path.n_intervals
    a, b = float(path.times[start]), float(path.times[end])
    tol = 1e-9 * max(1.0, abs(path.times[-1]))
    left = {}
    if start > 0:
        left = dict(
            s_a=int(path.behaviour[start - 1]),
            theta_0=float(path.bearings[start - 1]),
            nu_0=float(path.steps[start - 1]),
            dt_0=float(path.times[start] - path.times[start - 1]),
        )
    right = {}
    if end < n:
        right = dict(
            s_b=int(path.behaviour[end]),
            theta_n=float(path.bearings[end]),
            nu_n=float(path.steps[end]),
            dt_n=float(path.times[end + 1] - path.times[end]),
        )
    z_a = _location_at(path, start, obs_times, obs_locations)
    z_b = _location_at(path, end, obs_times, obs_locations)
    inside = (obs_times > a + tol) & (obs_times < b - tol)
    anchors = np.asarray(anchors, dtype=float)
    keep = (anchors > a + tol) & (anchors < b - tol)
    if obs_times.size and keep.any():
        near = np.abs(anchors[keep, None] - obs_times[None, :]).min(axis=1) <= tol
        keep[np.nonzero(keep)[0][near]] = False
    return SectionFixture(
        a=a,
        b=b,
        z_a=z_a,
        z_b=z_b,
        knot_times=obs_times[inside],
        knot_locations=obs_locations[inside],
        anchor_times=anchors[keep],
        **left,
        **right,
    )


def select_section(
    path: RefinedPath,
    obs_times: np.ndarray,
    obs_locations: np.ndarray,
    length_range: tuple[int, int],
    rng: np.random.Generator,
    grid: np.ndarray,
) -> Section:
    """Pick a random stretch of ``grid`` (the fixed nominal grid).

    The start is uniform over grid points and the length uniform over
    ``length_range`` grid gaps, truncated at the end of the path. The choice
    never looks at the current path, so the update stays reversible.
    """
    lo, hi = length_range
    g = grid.shape[0]
    u = int(rng.integers(g - 1))
    v = min(u + int(rng.integers(lo, hi + 1)), g - 1)
    start, end = (int(i) for i in grid_indices(path, grid[[u, v]]))
    fixture = make_fixture(path, start, end, obs_times, obs_locations, grid[u + 1 : v])
    return Section(start, end, fixture)


def splice(path: RefinedPath, start: int, end: int, times, states, bearings, steps) -> RefinedPath:
    """Replace grid points strictly between ``start`` and ``end`` and their intervals."""
    return RefinedPath(
        np.concatenate([path.times[:start], times, path.times[end + 1 :]]),
        np.concatenate([path.behaviour[:start], states, path.behaviour[end:]]),
        np.concatenate([path.bearings[:start], bearings, path.bearings[end:]]),
        np.concatenate([path.steps[:start], steps, path.steps[end:]]),
        path.origin,
    )


def mh_path_update(
    path: RefinedPath,
    params: Parameters,
    section: Section,
    delta_t: float,
    rng: np.random.Generator,
) -> tuple[RefinedPath, bool]:
    """Independence-sampler update of one section of the path."""
    fixture = section.fixture
    proposal = propose_section(params, fixture, delta_t, rng)
    if proposal is None:
        return path, False
    s, e = section.start, section.end
    current = section_log_weight(
        params,
        fixture,
        path.times[s : e + 1],
        path.behaviour[s:e],
        path.bearings[s:e],
        path.steps[s:e],
    )
    log_ratio = proposal.log_weight - (current[0] if current is not None else -math.inf)
    if not (log_ratio >= 0 or rng.random() < math.exp(log_ratio)):
        return path, False
    return splice(path, s, e, proposal.times, proposal.states, proposal.bearings, proposal.steps), True


def locations_at(path: RefinedPath, times: np.ndarray) -> np.ndarray:
    return integrate_locations(path.origin, path.bearings, path.steps)[
        observation_indices(path, times)
    ]
