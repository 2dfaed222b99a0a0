"""Initial path construction and the top-level MCMC loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .inference import (
    PriorSpec,
    SamplerConfig,
    behaviour_sufficient_stats,
    gibbs_behaviour,
    mh_movement_update,
    mh_path_update,
    movement_log_prior,
    movement_vector,
    nominal_grid,
    select_section,
)
from .model import (
    BehaviourParams,
    ModelError,
    MovementParams,
    ObservationSeries,
    Parameters,
    RefinedPath,
    path_log_density,
)

log = logging.getLogger(__name__)

MIN_VOLATILITY = 1e-6


class SamplerError(RuntimeError):
    """Sampler reached a non-finite state; ``payload`` says where."""

    def __init__(self, message: str, payload: dict):
        super().__init__(f"{message}: {payload}")
        self.payload = payload


def _movement_estimates(speeds, turns, turn_dts, r_max) -> MovementParams:
    """Moment estimates; ``turns`` are bearing increments over ``turn_dts``."""
    mu = max(float(np.mean(speeds)), 1e-3)
    var = float(np.var(speeds)) if speeds.size > 1 else mu * mu / 4.0
    # keep the start inside the speed-ratio bound
    var = min(max(var, 1e-6 * mu * mu), (0.9 * r_max * mu) ** 2)
    beta = 1.0
    turn = float(np.mean(turns**2 / turn_dts)) if turns.size else 0.0
    return MovementParams(max(turn, MIN_VOLATILITY), mu, beta, 2.0 * beta * var)


def initialize(
    observations: ObservationSeries,
    delta_t: float,
    speed_threshold: float = 100.0,
    priors: Optional[PriorSpec] = None,
) -> tuple[RefinedPath, Parameters]:
    """Spline path through the observations with thresholded two-state behaviour."""
    priors = priors or PriorSpec.default(2)
    t_obs = observations.times
    z_obs = observations.locations
    times = nominal_grid(t_obs, delta_t)
    spline = CubicSpline(t_obs, z_obs, axis=0, bc_type="natural")
    locs = spline(times)
    obs_idx = np.searchsorted(times, t_obs)
    locs[obs_idx] = z_obs
    disp = np.diff(locs, axis=0)
    steps = np.hypot(disp[:, 0], disp[:, 1])
    bearings = np.unwrap(np.arctan2(disp[:, 1], disp[:, 0]))
    dts = np.diff(times)
    speeds = steps / dts
    behaviour = (speeds > speed_threshold).astype(np.int64)
    path = RefinedPath(times, behaviour, bearings, steps, z_obs[0])

    counts = np.bincount(behaviour, minlength=2)
    if np.any(counts < 2):
        log.warning("fewer than two intervals in a state; using pooled movement estimates")
        pooled = _movement_estimates(speeds, np.diff(bearings), dts[:-1], priors.r_max)
        movement = (pooled, pooled)
    else:
        movement = []
        for s in range(2):
            mask = behaviour == s
            sel = np.nonzero(mask)[0]
            # bearing increments only within runs of the state
            within = sel[:-1][np.diff(sel) == 1]
            inc = bearings[within + 1] - bearings[within]
            movement.append(_movement_estimates(speeds[mask], inc, dts[within], priors.r_max))
        movement = tuple(movement)

    stats = behaviour_sufficient_stats(path, 2)
    lam = (priors.gamma_shape + stats.b.sum(axis=1)) / (priors.gamma_rate + stats.a)
    params = Parameters(BehaviourParams.two_state(*lam), movement)
    return path, params


def movement_names(n_states: int) -> list[str]:
    return [f"{name}_{s + 1}" for s in range(n_states) for name in
            ("sigma_theta_sq", "mu", "beta", "sigma_psi_sq")]


def parameter_names(n_states: int) -> list[str]:
    names = []
    for s in range(n_states):
        names += [f"lambda_{s + 1}", f"sigma_theta_sq_{s + 1}", f"mu_{s + 1}",
                  f"beta_{s + 1}", f"sigma_psi_sq_{s + 1}"]
    if n_states > 2:
        names += [f"q_{i + 1}_{j + 1}" for i in range(n_states) for j in range(n_states) if i != j]
    return names


def parameter_row(params: Parameters) -> np.ndarray:
    n = params.n_states
    row = []
    for s in range(n):
        row.append(params.behaviour.lam[s])
        row.extend(params.movement[s].as_tuple())
    if n > 2:
        q = params.behaviour.q
        row.extend(q[i, j] for i in range(n) for j in range(n) if i != j)
    return np.array(row)


@dataclass
class PosteriorSamples:
    names: list[str]
    iterations: np.ndarray
    draws: np.ndarray
    paths: list[tuple[int, RefinedPath]] = field(default_factory=list)
    accepted: dict = field(default_factory=dict)
    attempted: dict = field(default_factory=dict)

    @property
    def acceptance_rates(self) -> dict:
        return {k: self.accepted[k] / self.attempted[k] if self.attempted[k] else float("nan")
                for k in self.attempted}

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


def default_rw_sd(params: Parameters, scale: float) -> np.ndarray:
    return scale * movement_vector(params.movement)


def run_sampler(
    observations: ObservationSeries,
    config: SamplerConfig,
    priors: Optional[PriorSpec] = None,
    rng: Optional[np.random.Generator] = None,
    init: Optional[tuple[RefinedPath, Parameters]] = None,
    progress: bool = False,
) -> PosteriorSamples:
    """Run the chain and return thinned, post-burn-in draws and path snapshots."""
    priors = priors or PriorSpec.default(2)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    path, params = init or initialize(observations, config.delta_t, config.speed_threshold, priors)
    n_states = params.n_states
    rw_sd = (np.asarray(config.rw_proposal_sd, dtype=float) if config.rw_proposal_sd is not None
             else default_rw_sd(params, config.rw_scale))
    obs_times = observations.times
    obs_locs = observations.locations
    grid = nominal_grid(obs_times, config.delta_t)

    n_stored = config.n_iter // config.thin
    n_burn = int(math.floor(config.burn_in_fraction * n_stored))
    names = parameter_names(n_states)
    draws = np.empty((n_stored - n_burn, len(names)))
    iterations = np.empty(n_stored - n_burn, dtype=np.int64)
    paths = []
    accepted = {"movement": 0, "path": 0}
    attempted = {"movement": 0, "path": 0}
    stored = 0

    for it in range(config.n_iter):
        params = params.with_behaviour(
            gibbs_behaviour(behaviour_sufficient_stats(path, n_states), priors, rng)
        )
        try:
            # path and behaviour rates both changed since the last evaluation
            log_post = movement_log_prior(params.movement, priors) + path_log_density(params, path)
            params, ok, log_post = mh_movement_update(params, path, priors, rw_sd, rng, log_post)
        except ModelError as exc:
            raise SamplerError("non-finite likelihood", {"iteration": it, "component": "movement",
                                                          "error": str(exc)}) from exc
        attempted["movement"] += 1
        accepted["movement"] += ok
        for _ in range(config.path_updates_per_iter):
            section = select_section(path, obs_times, obs_locs, config.section_length_range, rng,
                                     grid)
            try:
                path, ok = mh_path_update(path, params, section, config.delta_t, rng)
            except ModelError as exc:
                raise SamplerError("non-finite likelihood", {"iteration": it, "component": "path",
                                                              "error": str(exc)}) from exc
            attempted["path"] += 1
            accepted["path"] += ok
        if (it + 1) % config.thin == 0:
            k = (it + 1) // config.thin - 1 - n_burn
            if k >= 0:
                draws[k] = parameter_row(params)
                iterations[k] = it + 1
                if k % config.path_store_stride == 0:
                    paths.append((k, path))
                stored += 1
        if progress and (it + 1) % max(1, config.n_iter // 20) == 0:
            rates = {key: accepted[key] / max(attempted[key], 1) for key in attempted}
            log.info("iteration %d/%d acceptance %s", it + 1, config.n_iter, rates)
    return PosteriorSamples(names, iterations, draws, paths, accepted, attempted)
