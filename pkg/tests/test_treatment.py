import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from epsminimax.hedge import ConfigError, SolverConfig, hedge_solve
from epsminimax.treatment import (
    MMROracle,
    MMRProblem,
    RobustBayesProblem,
    ThetaMMR,
    induced_action,
    is_feasible,
    mixture_regret,
    mmr_minimax_value,
    mmr_oracle,
    mmr_risk_bound,
    mqs_rule,
    ramp_worst_case_regret,
    rb_gradient_sampler,
    rb_minimax_value,
    rb_mu_star,
    rb_oracle,
    rb_rho_star,
    rho_star,
    threshold_grid,
    threshold_risk,
)


def random_mmr_problem(rng, max_rules=10):
    sigma = float(rng.uniform(0.5, 2.0))
    k = float(rng.uniform(0.5, 3.0))
    n = int(rng.integers(1, max_rules + 1))
    c = np.sort(rng.uniform(-k, k, size=n))
    return MMRProblem(sigma, k, tuple(c)), rng.dirichlet(np.ones(n))


def grid_regret(p, prob, mu, mu_star):
    """Mixture regret on arrays of (mu, mu_star) pairs."""
    treat = ndtr((mu[:, None] - prob.c[None, :]) / prob.sigma) @ p
    return mu_star * ((mu_star >= 0) - treat)


# --- problem construction ----------------------------------------------------------


def test_threshold_grid():
    c = threshold_grid(500, 2.0)
    assert len(c) == 500 and c[0] == -2.0 and c[-1] == 2.0
    assert np.allclose(np.diff(c), 4.0 / 499)
    assert threshold_grid(3, 1.0, (0.0, 1.0)) == (0.0, 0.5, 1.0)
    with pytest.raises(ConfigError):
        threshold_grid(0, 1.0)


def test_problem_validation():
    with pytest.raises(ConfigError):
        MMRProblem(1.0, 2.0, (0.0, 0.0))
    with pytest.raises(ConfigError):
        MMRProblem(0.0, 2.0, (0.0,))
    with pytest.raises(ConfigError):
        RobustBayesProblem(1.0, 2.0, 0.0, (0.0,))
    assert is_feasible(ThetaMMR(0.0, 2.0), 2.0)
    assert not is_feasible(ThetaMMR(0.0, 2.1), 2.0)


# --- risk and its bound --------------------------------------------------------------


def test_threshold_risk_examples():
    assert threshold_risk(0.7, ThetaMMR(1.3, 0.0), 1.0) == 0.0
    assert threshold_risk(60.0, ThetaMMR(0.0, 1.5), 1.0) == pytest.approx(1.5)
    assert threshold_risk(0.0, ThetaMMR(1.0, 1.0), 1.0) == pytest.approx(0.158655, abs=1e-6)


def test_risk_bound_examples():
    assert mmr_risk_bound(1.0, 2.0) == pytest.approx(2.5294, abs=5e-5)
    # independent grid: max_{x>=0} x Phi(-x) with step 1e-5
    x = np.arange(0.0, 10.0, 1e-5)
    grid_max = float(np.max(x * ndtr(-x)))
    assert mmr_risk_bound(1.0, 0.0) == pytest.approx(grid_max, abs=1e-9)
    assert mmr_risk_bound(1.0, 0.0) == pytest.approx(0.16997, abs=1e-5)


@given(st.floats(0.1, 5.0), st.floats(0.0, 5.0), st.floats(0.1, 10.0))
def test_risk_bound_scales(sigma, k, alpha):
    assert mmr_risk_bound(alpha * sigma, alpha * k) == pytest.approx(alpha * mmr_risk_bound(sigma, k), rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_risk_bound_dominates_feasible_risks(seed):
    rng = np.random.default_rng(seed)
    prob, _ = random_mmr_problem(rng)
    M = prob.risk_bound()
    mu_star = rng.uniform(-prob.k - 8 * prob.sigma, prob.k + 8 * prob.sigma, 2000)
    mu = mu_star + rng.uniform(-prob.k, prob.k, 2000)
    R = mu_star[:, None] * ((mu_star[:, None] >= 0) - ndtr((mu[:, None] - prob.c[None, :]) / prob.sigma))
    assert R.min() >= 0.0
    assert R.max() <= M + 1e-12


# --- minimax-regret oracle ---------------------------------------------------------


def test_mmr_oracle_symmetric_tie_prefers_positive_branch():
    prob = MMRProblem.with_grid(1.0, 2.0, 11)
    resp = mmr_oracle(np.full(11, 1 / 11), prob)
    assert resp.theta_id[1] > 0.0
    mirrored = ThetaMMR(-resp.theta_id[0], -resp.theta_id[1])
    assert mixture_regret(np.full(11, 1 / 11), mirrored, prob) == pytest.approx(resp.achieved_value, abs=1e-6)


def test_mmr_oracle_dominates_dense_grid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        prob, p = random_mmr_problem(rng)
        resp = mmr_oracle(p, prob)
        L = prob.k + 5 * prob.sigma
        axis = np.linspace(-L, L, 200)
        mu, mu_star = (a.ravel() for a in np.meshgrid(axis, axis, indexing="ij"))
        ok = np.abs(mu - mu_star) <= prob.k
        best_grid = grid_regret(p, prob, mu[ok], mu_star[ok]).max()
        assert resp.achieved_value + resp.delta >= best_grid
        # random feasible probes
        ms = rng.uniform(-L, L, 10_000)
        m = ms + rng.uniform(-prob.k, prob.k, 10_000)
        assert resp.achieved_value + resp.delta >= grid_regret(p, prob, m, ms).max()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mmr_oracle_response_is_consistent(seed):
    rng = np.random.default_rng(seed)
    prob, p = random_mmr_problem(rng)
    resp = MMROracle(prob)(p)
    theta = ThetaMMR(*resp.theta_id)
    # ids are rounded to 1e-6 per coordinate
    assert abs(theta.mu - theta.mu_star) <= prob.k + 2e-6
    assert resp.achieved_value == pytest.approx(float(p @ resp.risk_vector))
    assert mixture_regret(p, theta, prob) == pytest.approx(resp.achieved_value, abs=1e-5)
    assert 0.0 <= resp.delta <= 1e-4
    assert np.all(resp.risk_vector >= 0.0) and np.all(resp.risk_vector <= prob.risk_bound() + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mmr_value_symmetric_under_reflection(seed):
    rng = np.random.default_rng(seed)
    prob, p = random_mmr_problem(rng)
    reflected = MMRProblem(prob.sigma, prob.k, tuple(-prob.c[::-1]))
    a = MMROracle(prob)(p).achieved_value
    b = MMROracle(reflected)(p[::-1]).achieved_value
    assert a == pytest.approx(b, abs=1e-9)


# --- exact minimax-regret baseline -----------------------------------------------------


def test_rho_star_examples():
    assert rho_star(1.0, 2.0) == pytest.approx(1.8797, abs=1e-3)
    assert rho_star(2.0, 4.0) == pytest.approx(2 * rho_star(1.0, 2.0), abs=1e-8)
    assert rho_star(2.0, 4.0) == pytest.approx(3.7594, abs=1e-3)
    with pytest.raises(ConfigError):
        rho_star(1.0, 1.2)


def test_rho_star_bracket_and_monotonicity():
    ks = np.linspace(1.3, 10.0, 40)
    rhos = [rho_star(1.0, k) for k in ks]
    assert all(r < k for r, k in zip(rhos, ks))
    assert np.all(np.diff(rhos) > 0)


def test_mqs_rule_examples():
    rho = rho_star(1.0, 2.0)
    assert mqs_rule(0.0, rho) == 0.5
    assert mqs_rule(rho, rho) == 1.0
    assert mqs_rule(-rho / 2, rho) == pytest.approx(0.25)
    assert mqs_rule(-5.0, rho) == 0.0


def test_ramp_rule_attains_minimax_regret():
    rho = rho_star(1.0, 2.0)
    assert ramp_worst_case_regret(rho, 1.0, 2.0) == pytest.approx(mmr_minimax_value(1.0, 2.0), abs=1e-6)


# --- robust Bayes ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def rb_problem():
    return RobustBayesProblem.with_grid(1.0, 2.0, 0.5)


def test_rb_mu_star_edge_cases():
    prob = RobustBayesProblem(1.0, 2.0, 0.5, (-1e3,))
    assert rb_mu_star(0.5, np.array([1.0]), prob) == 0.5 - 2.0
    prob = RobustBayesProblem(1.0, 2.0, 2.0, (-1e3, 0.0, 1.0))
    assert rb_mu_star(2.0, np.array([0.2, 0.3, 0.5]), prob) == 4.0


def test_rb_mu_star_matches_grid(rb_problem):
    rng = np.random.default_rng(1)
    prob = rb_problem
    for trial in range(100):
        p = rng.dirichlet(np.ones(prob.I)) if trial else np.full(prob.I, 1 / prob.I)
        mu = float(rng.uniform(-3, 3)) if trial else 0.5
        ms = np.arange(mu - prob.k, mu + prob.k + 5e-5, 1e-4)
        vals = grid_regret(p, prob, np.full_like(ms, mu), ms)
        best = ms[np.argmax(vals)]
        got = rb_mu_star(mu, p, prob)
        closed = mixture_regret(p, ThetaMMR(mu, got), prob)
        assert closed >= vals.max() - 1e-10
        assert abs(got - best) <= 1e-4 or abs(closed - vals.max()) <= 1e-10


def test_rb_oracle_matches_grid(rb_problem):
    rng = np.random.default_rng(2)
    prob = rb_problem
    for _ in range(20):
        p = rng.dirichlet(np.ones(prob.I))
        resp = rb_oracle(p, prob)
        total = 0.0
        for mu in prob.prior_support:
            ms = np.linspace(mu - prob.k, mu + prob.k, 40_001)
            total += 0.5 * grid_regret(p, prob, np.full_like(ms, mu), ms).max()
        assert resp.achieved_value == pytest.approx(total, abs=1e-6)
        assert resp.delta == 0.0
        assert np.all(resp.risk_vector >= 0) and np.all(resp.risk_vector <= prob.risk_bound())


def test_rb_rho_star(rb_problem):
    rho, adjusted = rb_rho_star(rb_problem)
    assert adjusted == pytest.approx(1.8486, abs=1e-3)
    # independent trapezoid on 10^6 points
    x = np.linspace(0.0, 1.0, 1_000_001)
    mb, s, k = 0.5, 1.0, 2.0
    f = ndtr((2 * rho * x - rho - mb**2 / s**2) / (mb / s))
    trap = float(np.sum((f[1:] + f[:-1]) / 2) * (x[1] - x[0]))
    assert trap == pytest.approx((k - mb) / (2 * k), abs=1e-9)


def test_rb_exact_value(rb_problem):
    assert rb_minimax_value(rb_problem) == pytest.approx((2.0**2 - 0.5**2) / (2 * 2.0), abs=1e-9)


def test_rb_sampler_average_is_oracle(rb_problem):
    prob = rb_problem
    p = np.random.default_rng(3).dirichlet(np.ones(prob.I))
    outputs = {}
    rng = np.random.default_rng(0)
    while len(outputs) < 2:
        r = rb_gradient_sampler(p, prob, rng)
        outputs[r.theta_id[0]] = r.risk_vector
    avg = 0.5 * (outputs[0.5] + outputs[-0.5])
    np.testing.assert_array_equal(avg, rb_oracle(p, prob).risk_vector)


def test_rb_sampler_monte_carlo(rb_problem):
    prob = rb_problem
    p = np.random.default_rng(4).dirichlet(np.ones(prob.I))
    rng = np.random.default_rng(5)
    draws = np.array([rb_gradient_sampler(p, prob, rng).achieved_value for _ in range(100_000)])
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - rb_oracle(p, prob).achieved_value) <= 3 * se


def test_induced_action_is_monotone():
    rng = np.random.default_rng(6)
    c = threshold_grid(50, 2.0)
    p = rng.dirichlet(np.ones(50))
    a = induced_action(p, c, np.linspace(-3, 3, 301))
    assert a[0] == 0.0 and a[-1] == pytest.approx(1.0)
    assert np.all(np.diff(a) >= -1e-15)


def test_small_mmr_run_brackets_minimax_value():
    prob = MMRProblem.with_grid(1.0, 2.0, 41)
    M = prob.risk_bound()
    res = hedge_solve(lambda p: mmr_oracle(p, prob), SolverConfig(epsilon=0.25, M=M, I=prob.I))
    assert res.lower_bound <= 1.0 + 1e-9
    assert res.upper_bound >= 1.0 - 1e-9
    assert res.upper_bound - 1.0 <= 0.25
