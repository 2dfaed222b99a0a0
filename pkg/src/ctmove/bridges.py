"""Endpoint-conditioned proposals for a section of the refined path.

A section is the part of the path between two grid times ``a`` and ``b`` at
which the location is fixed. Behaviour is proposed by forward simulation with
rejection on the end state, bearings by a Brownian bridge in volatility-scaled
time, and steps from the OU-bridge Gaussian further conditioned on the fixed
locations (conditioning by kriging).

Sections touching either end of the whole path lack a flanking bearing/step
on that side; the corresponding fixture fields are ``None`` and the
conditioning is one-sided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    LOG_2PI,
    BehaviourParams,
    BehaviourTrajectory,
    ModelError,
    Parameters,
    build_refined_times,
    ctmc_stationary,
    initial_speed_log_density,
    interval_states,
    normal_logpdf,
    simulate_behaviour,
)

JITTER = 1e-10
MAX_CONDITION = 1e12
CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class SectionFixture:
    """Values held fixed while the section ``[a, b]`` is re-proposed.

    ``s_a``/``theta_0``/``nu_0``/``dt_0`` describe the refined interval ending at
    ``a`` and ``s_b``/``theta_n``/``nu_n``/``dt_n`` the one starting at ``b``;
    they are ``None`` when the section touches the start or end of the path.
    ``knot_times``/``knot_locations`` are fixed locations strictly inside the
    section (observations spanned by it). ``anchor_times`` are extra grid
    breakpoints kept in every proposal without constraining location.
    """

    a: float
    b: float
    z_a: np.ndarray
    z_b: np.ndarray
    s_a: Optional[int] = None
    s_b: Optional[int] = None
    theta_0: Optional[float] = None
    theta_n: Optional[float] = None
    nu_0: Optional[float] = None
    nu_n: Optional[float] = None
    dt_0: Optional[float] = None
    dt_n: Optional[float] = None
    knot_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    knot_locations: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    anchor_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        object.__setattr__(self, "z_a", np.asarray(self.z_a, dtype=float).reshape(2))
        object.__setattr__(self, "z_b", np.asarray(self.z_b, dtype=float).reshape(2))
        object.__setattr__(self, "knot_times", np.asarray(self.knot_times, dtype=float).reshape(-1))
        object.__setattr__(
            self, "knot_locations", np.asarray(self.knot_locations, dtype=float).reshape(-1, 2)
        )
        object.__setattr__(self, "anchor_times", np.asarray(self.anchor_times, dtype=float).reshape(-1))
        if not self.a < self.b:
            raise ModelError("section needs a < b")
        if self.has_left:
            if self.s_a is None or self.nu_0 is None or not (self.dt_0 and self.dt_0 > 0):
                raise ModelError("left flank needs s_a, theta_0, nu_0 and positive dt_0")
        if self.has_right:
            if self.nu_n is None or not (self.dt_n and self.dt_n > 0):
                raise ModelError("right flank needs theta_n, nu_n and positive dt_n")
        if self.knot_times.size and not (
            np.all(self.knot_times > self.a) and np.all(self.knot_times < self.b)
        ):
            raise ModelError("knot times must lie strictly inside the section")

    @property
    def has_left(self) -> bool:
        return self.theta_0 is not None

    @property
    def has_right(self) -> bool:
        return self.theta_n is not None

    @property
    def targets(self) -> np.ndarray:
        """Fixed displacements from ``z_a``: knots first, then ``z_b``."""
        return np.concatenate([self.knot_locations, self.z_b[None, :]]) - self.z_a


@dataclass(frozen=True)
class SectionProposal:
    behaviour: BehaviourTrajectory
    times: np.ndarray
    states: np.ndarray
    bearings: np.ndarray
    steps: np.ndarray
    log_marginal_zb: float
    log_weight: float


def propose_behaviour_bridge(
    behaviour: BehaviourParams,
    fixture: SectionFixture,
    rng: np.random.Generator,
) -> Optional[BehaviourTrajectory]:
    """One forward simulation from ``s_a``; ``None`` unless it ends in ``s_b``.

    Without a left flank the start state is drawn from the stationary
    distribution; without ``s_b`` the end state is unconstrained.
    """
    if fixture.s_a is None:
        start = int(rng.choice(behaviour.n_states, p=ctmc_stationary(behaviour)))
    else:
        start = fixture.s_a
    trajectory = simulate_behaviour(behaviour, fixture.a, fixture.b, start, rng)
    if fixture.s_b is not None and trajectory.final_state != fixture.s_b:
        return None
    return trajectory


def bearing_bridge(
    theta_0: float,
    theta_n: float,
    times: np.ndarray,
    states: np.ndarray,
    params: Parameters,
    rng: np.random.Generator,
) -> np.ndarray:
    """Brownian bridge for the bearings strictly inside ``times``.

    ``times`` holds ``n + 1`` grid points with ``theta_0`` at the first and
    ``theta_n`` at the last; ``states[i]`` governs ``[times[i], times[i+1])``.
    Returns the ``n - 1`` interior bearings.
    """
    var = params.arrays.sigma_theta_sq[states] * np.diff(times)
    return _bridge_from_variances(theta_0, theta_n, var, rng)


def _bridge_from_variances(x0, xn, var, rng):
    # bridge in the time change tau = cumulative variance
    tau = np.cumsum(var)
    total = tau[-1]
    if not total > 0:
        raise ModelError("bearing bridge has zero total transformed time")
    inner = tau[:-1]
    if inner.size == 0:
        return np.empty(0)
    walk = np.cumsum(np.sqrt(var) * rng.standard_normal(var.shape[0]))
    return x0 + walk[:-1] + (inner / total) * (xn - x0 - walk[-1])


def bridge_moments(theta_0, theta_n, times, states, params):
    """Analytic mean and covariance of :func:`bearing_bridge` output."""
    var = params.arrays.sigma_theta_sq[states] * np.diff(times)
    tau = np.cumsum(var)
    total = tau[-1]
    inner = tau[:-1]
    mean = theta_0 + (inner / total) * (theta_n - theta_0)
    cov = np.minimum.outer(inner, inner) - np.outer(inner, inner) / total
    return mean, cov


def propose_bearings(
    fixture: SectionFixture,
    times: np.ndarray,
    states: np.ndarray,
    params: Parameters,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bearings for the section's intervals given whichever flanks exist."""
    sig = params.arrays.sigma_theta_sq
    dts = np.diff(times)
    inner_var = sig[states] * dts
    if fixture.has_left and fixture.has_right:
        var = np.concatenate([[sig[fixture.s_a] * fixture.dt_0], inner_var])
        return _bridge_from_variances(fixture.theta_0, fixture.theta_n, var, rng)
    if fixture.has_right:
        # flat start: random walk run backwards from theta_n
        inc = np.sqrt(inner_var) * rng.standard_normal(inner_var.shape[0])
        return fixture.theta_n - np.cumsum(inc[::-1])[::-1]
    if fixture.has_left:
        var = np.concatenate([[sig[fixture.s_a] * fixture.dt_0], inner_var[:-1]])
        inc = np.sqrt(var) * rng.standard_normal(var.shape[0])
        return fixture.theta_0 + np.cumsum(inc)
    start = rng.uniform(-math.pi, math.pi)
    inc = np.sqrt(inner_var[:-1]) * rng.standard_normal(inner_var.shape[0] - 1)
    return start + np.concatenate([[0.0], np.cumsum(inc)])


def bearing_flank_log_density(fixture, times, states, params) -> float:
    """``log p(theta_n | theta_0, behaviour)``; zero unless both flanks exist."""
    if not (fixture.has_left and fixture.has_right):
        return 0.0
    sig = params.arrays.sigma_theta_sq
    total = sig[fixture.s_a] * fixture.dt_0 + float(np.sum(sig[states] * np.diff(times)))
    return float(normal_logpdf(fixture.theta_n, fixture.theta_0, total))


def _speed_chain(fixture, times, states, params):
    """Joint mean/covariance of the speeds on the section's intervals.

    Includes the right-flank speed as a final coordinate when it exists.
    """
    arr = params.arrays
    dts = np.diff(times)
    m = dts.shape[0]
    size = m + 1 if fixture.has_right else m
    mu = arr.mu[states]
    beta = arr.beta[states]
    sig = arr.sigma_psi_sq[states]
    if fixture.has_left:
        s = fixture.s_a
        psi_prev = fixture.nu_0 / fixture.dt_0
        decay0 = math.exp(-arr.beta[s] * fixture.dt_0)
        mean0 = arr.mu[s] + decay0 * (psi_prev - arr.mu[s])
        var0 = arr.sigma_psi_sq[s] * -math.expm1(-2.0 * arr.beta[s] * fixture.dt_0) / (2.0 * arr.beta[s])
    else:
        mean0 = mu[0]
        var0 = sig[0] / (2.0 * beta[0])
    # transitions psi_k -> psi_{k+1} use interval k's state and length
    ntr = size - 1
    decay = np.exp(-beta[:ntr] * dts[:ntr])
    noise = sig[:ntr] * -np.expm1(-2.0 * beta[:ntr] * dts[:ntr]) / (2.0 * beta[:ntr])
    mean = np.empty(size)
    var = np.empty(size)
    mean[0] = mean0
    var[0] = var0
    for k in range(ntr):
        mean[k + 1] = mu[k] + decay[k] * (mean[k] - mu[k])
        var[k + 1] = decay[k] ** 2 * var[k] + noise[k]
    # Cov(psi_i, psi_j) = var_i * prod(decay[i:j]) for i <= j
    logc = np.concatenate([[0.0], np.cumsum(np.log(np.maximum(decay, 1e-300)))])
    expo = logc[None, :] - logc[:, None]
    upper = np.triu(np.exp(np.minimum(expo, 0.0)))
    cov = var[:, None] * upper
    cov = cov + np.triu(cov, 1).T
    return mean, cov, dts


def ou_bridge_step_moments(
    fixture: SectionFixture,
    times: np.ndarray,
    states: np.ndarray,
    params: Parameters,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the section's steps given the flanking steps.

    Raises:
        ModelError: if the moments are not finite.
    """
    m1, s1, _ = _step_moments(fixture, times, states, params)
    return m1, s1


def _step_moments(fixture, times, states, params):
    mean, cov, dts = _speed_chain(fixture, times, states, params)
    log_flank = 0.0
    if fixture.has_right:
        psi_n = fixture.nu_n / fixture.dt_n
        vn = cov[-1, -1]
        c = cov[:-1, -1]
        log_flank = float(normal_logpdf(psi_n, mean[-1], vn))
        mean = mean[:-1] + c * ((psi_n - mean[-1]) / vn)
        cov = cov[:-1, :-1] - np.outer(c, c) / vn
    m1 = mean * dts
    s1 = cov * np.outer(dts, dts)
    s1 = 0.5 * (s1 + s1.T)
    if not (np.all(np.isfinite(m1)) and np.all(np.isfinite(s1))):
        raise ModelError("non-finite step moments")
    return m1, s1, log_flank


def constraint_matrix(bearings: np.ndarray, times: np.ndarray, fixture: SectionFixture) -> np.ndarray:
    """Rows map steps to displacements at each knot and at ``b``.

    Row pair ``2j, 2j+1`` gives the x/y displacement from ``z_a`` to the j-th
    fixed location; the last pair is ``z_b`` (the plain cos/sin matrix when
    there are no knots).
    """
    cos = np.cos(bearings)
    sin = np.sin(bearings)
    if fixture.knot_times.size == 0:
        return np.vstack([cos, sin])
    ends = np.concatenate([np.searchsorted(times, fixture.knot_times), [times.shape[0] - 1]])
    mask = np.arange(bearings.shape[0])[None, :] < ends[:, None]
    out = np.empty((2 * ends.shape[0], bearings.shape[0]))
    out[0::2] = mask * cos
    out[1::2] = mask * sin
    return out


def step_location_joint(
    m_1: np.ndarray,
    sigma_1: np.ndarray,
    bearings: np.ndarray,
    fixture: SectionFixture,
    times: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moments of the fixed locations implied by Gaussian steps.

    Returns ``(m_2, sigma_2, sigma_12)`` with ``m_2 = z_a + A m_1``.
    """
    if times is None:
        times = np.arange(bearings.shape[0] + 1, dtype=float)
    a_mat = constraint_matrix(bearings, times, fixture)
    sigma_12 = sigma_1 @ a_mat.T
    sigma_2 = a_mat @ sigma_12
    sigma_2 = 0.5 * (sigma_2 + sigma_2.T)
    m_2 = np.tile(fixture.z_a, a_mat.shape[0] // 2) + a_mat @ m_1
    return m_2, sigma_2, sigma_12


def _regularised_cholesky(sigma_2):
    dim = sigma_2.shape[0]
    reg = sigma_2 + (JITTER * np.trace(sigma_2) / dim) * np.eye(dim)
    eig = np.linalg.eigvalsh(reg)
    if not (eig[0] > 0 and eig[-1] / eig[0] <= MAX_CONDITION):
        return None
    return np.linalg.cholesky(reg)


def _mvn_logpdf_chol(x, mean, chol):
    z = np.linalg.solve(chol, x - mean)
    return -0.5 * (x.shape[0] * LOG_2PI + z @ z) - np.sum(np.log(np.diag(chol)))


def _cho_solve(chol, rhs):
    return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def kriging_step_draw(
    m_1: np.ndarray,
    sigma_1: np.ndarray,
    sigma_12: np.ndarray,
    sigma_2: np.ndarray,
    a_mat: np.ndarray,
    fixture: SectionFixture,
    rng: np.random.Generator,
) -> Optional[np.ndarray]:
    """Draw steps from ``N(m_1, sigma_1)`` conditioned on ``A nu = targets``.

    Returns ``None`` when ``sigma_2`` is numerically singular or the
    constraint cannot be met.
    """
    chol = _regularised_cholesky(sigma_2)
    if chol is None:
        return None
    return _kriging_with_chol(m_1, sigma_1, sigma_12, chol, a_mat, fixture.targets.reshape(-1), rng)


def _kriging_with_chol(m_1, sigma_1, sigma_12, chol, a_mat, target, rng):
    x = m_1 + _psd_factor(sigma_1) @ rng.standard_normal(m_1.shape[0])
    nu = x - sigma_12 @ _cho_solve(chol, a_mat @ x - target)
    # one refinement pass removes the residual left by the jitter
    nu = nu - sigma_12 @ _cho_solve(chol, a_mat @ nu - target)
    resid = a_mat @ nu - target
    # a constraint outside the reachable span cannot be met
    if np.linalg.norm(resid) > CONSTRAINT_TOL * (1.0 + np.linalg.norm(target)):
        return None
    return nu


def _speed_start_correction(fixture, states, steps, times, params) -> float:
    """Swap the state-specific initial speed law for the stationary mixture."""
    if fixture.has_left:
        return 0.0
    arr = params.arrays
    s = states[0]
    psi = steps[0] / (times[1] - times[0])
    own = float(normal_logpdf(psi, arr.mu[s], arr.speed_variance[s]))
    return initial_speed_log_density(params, psi) - own


def section_log_weight(
    params: Parameters,
    fixture: SectionFixture,
    times: np.ndarray,
    states: np.ndarray,
    bearings: np.ndarray,
    steps: np.ndarray,
) -> Optional[tuple[float, float]]:
    """Importance weight of a section configuration under the proposal.

    Returns ``(log_weight, log_marginal_zb)`` or ``None`` if the location
    covariance is singular. The weight is the density of the fixed locations
    given behaviour and bearings, times the flank terms that depend on the
    behaviour.
    """
    m1, s1, log_speed = _step_moments(fixture, times, states, params)
    m2, s2, _ = step_location_joint(m1, s1, bearings, fixture, times)
    chol = _regularised_cholesky(s2)
    if chol is None:
        return None
    target = (fixture.targets + fixture.z_a).reshape(-1)
    log_zb = float(_mvn_logpdf_chol(target, m2, chol))
    log_w = (
        log_zb
        + log_speed
        + bearing_flank_log_density(fixture, times, states, params)
        + _speed_start_correction(fixture, states, steps, times, params)
    )
    return log_w, log_zb


def propose_section(
    params: Parameters,
    fixture: SectionFixture,
    delta_t: float,
    rng: np.random.Generator,
) -> Optional[SectionProposal]:
    """Full section proposal, or ``None`` if any stage rejects."""
    trajectory = propose_behaviour_bridge(params.behaviour, fixture, rng)
    if trajectory is None:
        return None
    times = build_refined_times(
        trajectory, delta_t, np.concatenate([fixture.knot_times, fixture.anchor_times])
    )
    states = interval_states(trajectory, times)
    bearings = propose_bearings(fixture, times, states, params, rng)
    m1, s1, log_speed = _step_moments(fixture, times, states, params)
    a_mat = constraint_matrix(bearings, times, fixture)
    s12 = s1 @ a_mat.T
    s2 = a_mat @ s12
    s2 = 0.5 * (s2 + s2.T)
    chol = _regularised_cholesky(s2)
    if chol is None:
        return None
    targets = fixture.targets.reshape(-1)
    steps = _kriging_with_chol(m1, s1, s12, chol, a_mat, targets, rng)
    if steps is None:
        return None
    m2 = np.tile(fixture.z_a, a_mat.shape[0] // 2) + a_mat @ m1
    log_zb = float(_mvn_logpdf_chol(targets + np.tile(fixture.z_a, a_mat.shape[0] // 2), m2, chol))
    log_w = (
        log_zb
        + log_speed
        + bearing_flank_log_density(fixture, times, states, params)
        + _speed_start_correction(fixture, states, steps, times, params)
    )
    return SectionProposal(trajectory, times, states, bearings, steps, log_zb, log_w)
