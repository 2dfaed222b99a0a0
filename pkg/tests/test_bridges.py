import math

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import expm

from ctmove.bridges import (
    SectionFixture,
    bearing_bridge,
    bridge_moments,
    constraint_matrix,
    kriging_step_draw,
    ou_bridge_step_moments,
    propose_behaviour_bridge,
    propose_section,
    step_location_joint,
)
from ctmove.model import BehaviourParams, ModelError, MovementParams, Parameters

TWO = Parameters(
    BehaviourParams.two_state(0.3, 0.8),
    (MovementParams(2.0, 60.0, 1.3, 5000.0), MovementParams(0.3, 500.0, 0.25, 20000.0)),
)


def single_state(m: MovementParams, lam=1e-12) -> Parameters:
    return Parameters(BehaviourParams.two_state(lam, lam), (m, m))


def interior_fixture(a=0.0, b=10.0, s_a=0, s_b=0, **kw):
    base = dict(a=a, b=b, z_a=[0.0, 0.0], z_b=[300.0, 100.0], s_a=s_a, s_b=s_b,
                theta_0=0.1, theta_n=0.4, nu_0=100.0, nu_n=120.0, dt_0=2.0, dt_n=2.0)
    base.update(kw)
    return SectionFixture(**base)


# ---------------------------------------------------------------- dense oracles

def dense_bridge_oracle(theta_0, theta_n, times, states, params):
    """Condition the full Gaussian random walk on its end value by Schur complement."""
    var = params.arrays.sigma_theta_sq[states] * np.diff(times)
    n = var.size
    lower = np.tril(np.ones((n, n)))
    cov = lower @ np.diag(var) @ lower.T
    mean = np.full(n, theta_0)
    k = n - 1
    c12 = cov[:k, k]
    m = mean[:k] + c12 / cov[k, k] * (theta_n - mean[k])
    s = cov[:k, :k] - np.outer(c12, c12) / cov[k, k]
    return m, s


def dense_ou_oracle(psi_0, psi_n, times, states, params, s_before, dt_before):
    """Speeds psi_1..psi_n as an explicit linear map of independent noises."""
    arr = params.arrays
    dts = np.concatenate([[dt_before], np.diff(times)])
    sts = np.concatenate([[s_before], states])
    n = dts.size
    offset = np.zeros(n + 1)
    loading = np.zeros((n + 1, n))
    offset[0] = psi_0
    for i in range(1, n + 1):
        s = sts[i - 1]
        decay = math.exp(-arr.beta[s] * dts[i - 1])
        sd = math.sqrt(arr.sigma_psi_sq[s] * (1 - decay**2) / (2 * arr.beta[s]))
        offset[i] = arr.mu[s] * (1 - decay) + decay * offset[i - 1]
        loading[i] = decay * loading[i - 1]
        loading[i, i - 1] = sd
    mean = offset[1:]
    cov = loading[1:] @ loading[1:].T
    k = n - 1
    c12 = cov[:k, k]
    m = mean[:k] + c12 / cov[k, k] * (psi_n - mean[k])
    s = cov[:k, :k] - np.outer(c12, c12) / cov[k, k]
    d = np.diff(times)
    return m * d, s * np.outer(d, d)


# ---------------------------------------------------------------- behaviour bridge

class TestBehaviourBridge:
    def test_equal_ends_negligible_rate_always_accepted(self):
        params = single_state(MovementParams(1, 1, 1, 1), lam=1e-12)
        rng = np.random.default_rng(0)
        fx = interior_fixture(s_a=1, s_b=1)
        assert all(propose_behaviour_bridge(params.behaviour, fx, rng) is not None for _ in range(200))

    def test_acceptance_matches_matrix_exponential(self):
        bp = BehaviourParams.two_state(1.0, 1.0)
        p_end = expm(bp.generator() * 1.0)[0, 1]
        assert p_end == pytest.approx(math.exp(-1) * math.sinh(1))
        rng = np.random.default_rng(1)
        fx = interior_fixture(a=0.0, b=1.0, s_a=0, s_b=1)
        n = 20_000
        hits = sum(propose_behaviour_bridge(bp, fx, rng) is not None for _ in range(n))
        frac = hits / n
        assert abs(frac - p_end) < 3 * math.sqrt(p_end * (1 - p_end) / n)

    def test_unconstrained_end_never_rejects(self):
        bp = BehaviourParams.two_state(1.0, 1.0)
        fx = SectionFixture(a=0.0, b=5.0, z_a=[0, 0], z_b=[1, 1], s_a=0, theta_0=0.0, nu_0=1.0, dt_0=1.0)
        rng = np.random.default_rng(2)
        assert all(propose_behaviour_bridge(bp, fx, rng) is not None for _ in range(100))


# ---------------------------------------------------------------- bearing bridge

class TestBearingBridge:
    def test_single_interval_is_empty(self):
        out = bearing_bridge(0.0, 1.0, np.array([0.0, 2.0]), np.array([0]), TWO, np.random.default_rng())
        assert out.shape == (0,)

    def test_zero_span_rejected(self):
        with pytest.raises(ModelError):
            bearing_bridge(0.0, 1.0, np.array([0.0, 0.0]), np.array([0]), TWO, np.random.default_rng())

    def test_constant_volatility_linear_mean(self):
        times = np.array([0.0, 1.0, 2.5, 4.0, 6.0])
        states = np.zeros(4, dtype=int)
        rng = np.random.default_rng(3)
        draws = np.array([bearing_bridge(0.5, 2.5, times, states, TWO, rng) for _ in range(100_000)])
        interp = np.interp(times[1:-1], [0.0, 6.0], [0.5, 2.5])
        sd = draws.std(axis=0, ddof=1)
        assert np.all(np.abs(draws.mean(axis=0) - interp) < 3 * sd / math.sqrt(draws.shape[0]))
        tau = 2.0 * times[1:-1]
        exact_var = tau * (12.0 - tau) / 12.0
        se_var = exact_var * math.sqrt(2 / (draws.shape[0] - 1))
        assert np.all(np.abs(draws.var(axis=0, ddof=1) - exact_var) < 3 * se_var)

    def test_two_state_matches_dense_oracle(self):
        times = np.array([0.0, 1.0, 3.0, 4.5, 6.0])
        states = np.array([0, 1, 1, 0])
        mean, cov = bridge_moments(-0.2, 1.1, times, states, TWO)
        m_ref, s_ref = dense_bridge_oracle(-0.2, 1.1, times, states, TWO)
        np.testing.assert_allclose(mean, m_ref, atol=1e-10)
        np.testing.assert_allclose(cov, s_ref, atol=1e-10)
        # one interior point: the marginal variance is v_left v_right / (v_left + v_right)
        var = TWO.arrays.sigma_theta_sq[states] * np.diff(times)
        v_left, v_right = var[:2].sum(), var[2:].sum()
        assert cov[1, 1] == pytest.approx(v_left * v_right / (v_left + v_right), abs=1e-10)

    def test_two_state_sampler_matches_oracle(self):
        times = np.array([0.0, 1.0, 3.0, 4.5, 6.0])
        states = np.array([0, 1, 1, 0])
        m_ref, s_ref = dense_bridge_oracle(-0.2, 1.1, times, states, TWO)
        rng = np.random.default_rng(4)
        draws = np.array([bearing_bridge(-0.2, 1.1, times, states, TWO, rng) for _ in range(100_000)])
        se = np.sqrt(np.diag(s_ref) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - m_ref) < 3 * se)
        se_var = np.diag(s_ref) * math.sqrt(2 / (draws.shape[0] - 1))
        assert np.all(np.abs(draws.var(axis=0, ddof=1) - np.diag(s_ref)) < 3 * se_var)


# ---------------------------------------------------------------- OU bridge

class TestOUBridge:
    @pytest.mark.parametrize("states", [[0, 0, 0, 0], [0, 1, 1, 0], [1, 1, 0, 1]])
    def test_matches_dense_oracle(self, states):
        states = np.array(states)
        times = np.array([10.0, 11.5, 13.0, 14.0, 16.0])
        fx = interior_fixture(a=10.0, b=16.0, s_a=1, s_b=1, nu_0=900.0, nu_n=40.0, dt_0=1.7, dt_n=2.0)
        m1, s1 = ou_bridge_step_moments(fx, times, states, TWO)
        m_ref, s_ref = dense_ou_oracle(900 / 1.7, 40 / 2.0, times, states, TWO, 1, 1.7)
        np.testing.assert_allclose(m1, m_ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(s1, s_ref, atol=1e-10, rtol=0)

    def test_bridge_through_the_mean(self):
        m = MovementParams(0.5, 40.0, 0.6, 300.0)
        params = single_state(m)
        times = np.array([0.0, 2.0, 3.0, 5.5, 8.0])
        fx = interior_fixture(a=0.0, b=8.0, nu_0=40.0 * 2.0, nu_n=40.0 * 1.5, dt_0=2.0, dt_n=1.5)
        m1, _ = ou_bridge_step_moments(fx, times, np.zeros(4, int), params)
        np.testing.assert_allclose(m1, 40.0 * np.diff(times), rtol=1e-12)

    def test_fast_reversion_decorrelates(self):
        m = MovementParams(0.5, 40.0, 1e4, 2e4)
        params = single_state(m)
        times = np.array([0.0, 2.0, 3.0, 5.5])
        fx = interior_fixture(a=0.0, b=5.5, nu_0=-500.0, nu_n=900.0)
        m1, s1 = ou_bridge_step_moments(fx, times, np.zeros(3, int), params)
        d = np.diff(times)
        np.testing.assert_allclose(m1, 40.0 * d, rtol=1e-9)
        np.testing.assert_allclose(s1, np.diag(d**2 * 1.0), atol=1e-9)

    def test_covariance_symmetric_psd(self):
        times = np.linspace(0, 24, 13)
        states = np.array([0] * 5 + [1] * 7)
        fx = interior_fixture(a=0.0, b=24.0, s_a=0, s_b=1)
        _, s1 = ou_bridge_step_moments(fx, times, states, TWO)
        assert np.max(np.abs(s1 - s1.T)) <= 1e-12 * np.max(np.abs(s1))
        assert np.min(np.linalg.eigvalsh(s1)) > -1e-9 * np.max(np.abs(s1))


# ---------------------------------------------------------------- locations and kriging

class TestStepLocationJoint:
    def test_identity_steps_east(self):
        n = 5
        fx = interior_fixture()
        m2, s2, s12 = step_location_joint(np.ones(n), np.eye(n), np.zeros(n), fx)
        np.testing.assert_allclose(s2, [[n, 0], [0, 0]])
        np.testing.assert_allclose(m2, [n, 0])
        np.testing.assert_allclose(s12, np.column_stack([np.ones(n), np.zeros(n)]))

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(5)
        n = 6
        m1 = rng.normal(50, 10, n)
        root = rng.normal(size=(n, n))
        s1 = root @ root.T * 20
        bearings = rng.uniform(-np.pi, np.pi, n)
        fx = interior_fixture(z_a=[10.0, -5.0])
        m2, s2, s12 = step_location_joint(m1, s1, bearings, fx)
        assert np.allclose(s2, s2.T) and np.min(np.linalg.eigvalsh(s2)) >= -1e-9
        nu = rng.multivariate_normal(m1, s1, size=100_000)
        a = np.vstack([np.cos(bearings), np.sin(bearings)])
        z = fx.z_a + nu @ a.T
        se = np.sqrt(np.diag(s2) / z.shape[0])
        assert np.all(np.abs(z.mean(axis=0) - m2) < 3 * se)
        se_var = np.diag(s2) * math.sqrt(2 / (z.shape[0] - 1))
        assert np.all(np.abs(z.var(axis=0, ddof=1) - np.diag(s2)) < 3 * se_var)
        cross = ((nu - m1).T @ (z - m2)) / (z.shape[0] - 1)
        scale = np.sqrt(np.outer(np.diag(s1), np.diag(s2)) / z.shape[0])
        assert np.all(np.abs(cross - s12) < 4 * scale)


def random_instance(rng, n):
    m1 = rng.normal(100, 30, n)
    root = rng.normal(size=(n, n))
    s1 = root @ root.T * rng.uniform(1, 500) + np.eye(n)
    bearings = rng.uniform(-10, 10, n)
    fx = interior_fixture(z_a=rng.normal(0, 1000, 2), z_b=rng.normal(0, 1000, 2))
    m2, s2, s12 = step_location_joint(m1, s1, bearings, fx)
    a = constraint_matrix(bearings, np.arange(n + 1.0), fx)
    return m1, s1, s12, s2, a, fx


class TestKriging:
    def test_fully_constrained(self):
        rng = np.random.default_rng(6)
        bearings = np.array([0.3, 1.9])
        fx = interior_fixture(z_a=[1.0, 2.0], z_b=[40.0, 75.0])
        a = np.vstack([np.cos(bearings), np.sin(bearings)])
        exact = np.linalg.solve(a, fx.z_b - fx.z_a)
        for _ in range(5):
            m1 = rng.normal(0, 100, 2)
            s1 = np.diag(rng.uniform(1, 100, 2))
            _, s2, s12 = step_location_joint(m1, s1, bearings, fx)
            nu = kriging_step_draw(m1, s1, s12, s2, a, fx, rng)
            np.testing.assert_allclose(nu, exact, rtol=1e-8)

    def test_constraint_always_met(self):
        rng = np.random.default_rng(7)
        for _ in range(2_000):
            n = int(rng.integers(2, 31))
            m1, s1, s12, s2, a, fx = random_instance(rng, n)
            nu = kriging_step_draw(m1, s1, s12, s2, a, fx, rng)
            if nu is None:
                continue
            d = fx.z_b - fx.z_a
            assert np.linalg.norm(a @ nu - d) <= 1e-8 * (1 + np.linalg.norm(d))

    def test_singular_location_covariance_fails(self):
        rng = np.random.default_rng(8)
        bearings = np.zeros(4)
        fx = interior_fixture()
        m1 = np.ones(4)
        s1 = np.eye(4)
        _, s2, s12 = step_location_joint(m1, s1, bearings, fx)
        a = np.vstack([np.cos(bearings), np.sin(bearings)])
        assert kriging_step_draw(m1, s1, s12, s2, a, fx, rng) is None

    def test_distribution_matches_conditional_gaussian(self):
        rng = np.random.default_rng(9)
        m1, s1, s12, s2, a, fx = random_instance(rng, 5)
        d = fx.z_b
        m2 = fx.z_a + a @ m1
        gain = s12 @ np.linalg.inv(s2)
        mean = m1 + gain @ (d - m2)
        cov = s1 - gain @ s12.T
        draws = np.array([kriging_step_draw(m1, s1, s12, s2, a, fx, rng) for _ in range(100_000)])
        sd = np.sqrt(np.clip(np.diag(cov), 0, None))
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * sd / math.sqrt(draws.shape[0]) + 1e-9)
        se_var = np.diag(cov) * math.sqrt(2 / (draws.shape[0] - 1))
        assert np.all(np.abs(draws.var(axis=0, ddof=1) - np.diag(cov)) < 3 * se_var + 1e-9)


# ---------------------------------------------------------------- full proposal

class TestProposeSection:
    def test_no_switching_gives_finite_proposal(self):
        params = single_state(MovementParams(0.3, 50.0, 0.5, 400.0), lam=1e-12)
        fx = interior_fixture(a=0.0, b=24.0, z_b=[800.0, 300.0], nu_0=100.0, nu_n=100.0)
        rng = np.random.default_rng(10)
        prop = propose_section(params, fx, 2.0, rng)
        assert prop is not None and math.isfinite(prop.log_marginal_zb)
        loc = fx.z_a + np.array([np.sum(prop.steps * np.cos(prop.bearings)),
                                 np.sum(prop.steps * np.sin(prop.bearings))])
        np.testing.assert_allclose(loc, fx.z_b, rtol=1e-8)

    def test_deterministic(self):
        fx = interior_fixture(a=0.0, b=24.0, s_a=0, s_b=1)
        a = propose_section(TWO, fx, 2.0, np.random.default_rng(12))
        b = propose_section(TWO, fx, 2.0, np.random.default_rng(12))
        assert (a is None) == (b is None)
        if a is not None:
            assert np.array_equal(a.steps, b.steps) and np.array_equal(a.times, b.times)

    def test_endpoint_identity_with_knots_and_open_ends(self):
        rng = np.random.default_rng(13)
        fixtures = [
            SectionFixture(a=0.0, b=48.0, z_a=[0, 0], z_b=[500, -200], s_b=1, theta_n=0.3,
                           nu_n=1000.0, dt_n=2.0, knot_times=[24.0], knot_locations=[[100, 50]]),
            SectionFixture(a=24.0, b=72.0, z_a=[0, 0], z_b=[500, -200], s_a=0, theta_0=0.3,
                           nu_0=100.0, dt_0=2.0, knot_times=[48.0], knot_locations=[[-300, 50]]),
            SectionFixture(a=0.0, b=24.0, z_a=[5, 5], z_b=[500, -200]),
        ]
        for fx in fixtures:
            for _ in range(30):
                prop = propose_section(TWO, fx, 2.0, rng)
                if prop is None:
                    continue
                locs = fx.z_a + np.cumsum(np.column_stack([prop.steps * np.cos(prop.bearings),
                                                           prop.steps * np.sin(prop.bearings)]), axis=0)
                locs = np.vstack([fx.z_a, locs])
                for t, z in zip(np.append(fx.knot_times, fx.b), np.vstack([fx.knot_locations, fx.z_b])):
                    k = np.searchsorted(prop.times, t)
                    assert prop.times[k] == t
                    np.testing.assert_allclose(locs[k], z, rtol=1e-8, atol=1e-8)
                assert prop.times[0] == fx.a and prop.times[-1] == fx.b
