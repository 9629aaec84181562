"""Treatment choice with partial identification over a menu of threshold rules.

A policy maker sees ``mu_hat ~ N(mu, sigma^2)`` from an experiment whose
effect ``mu`` may differ from the target-population effect ``mu_star`` by at
most ``k``.  Rule ``i`` treats iff ``mu_hat >= c_i`` and is scored by expected
regret ``mu_star * (1{mu_star >= 0} - P(mu_hat >= c_i))``.

Two nature oracles are provided: worst-case regret over the identified set
(minimax regret) and worst-case Bayes regret over priors with a fixed
two-point marginal on ``mu`` (ex-ante robust Bayes), together with the known
exact solutions used as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr

from ._numerics import (
    PHI_AT_ZERO,
    PHI_PRIME_MAX,
    bisect_root,
    gauss_legendre_unit,
    golden_section_max,
)
from .hedge import ConfigError, OracleResponse

THETA_DECIMALS = 6
TIE_TOL = 1e-12


class ThetaMMR(NamedTuple):
    mu: float
    mu_star: float


def _thresholds(values: Sequence[float]) -> tuple[float, ...]:
    c = tuple(float(v) for v in values)
    if not c:
        raise ConfigError("threshold menu is empty")
    if not all(math.isfinite(v) for v in c):
        raise ConfigError("thresholds must be finite")
    if any(b <= a for a, b in zip(c, c[1:])):
        raise ConfigError("thresholds must be strictly increasing")
    return c


def threshold_grid(
    n: int, k: float, interval: tuple[float, float] | None = None
) -> tuple[float, ...]:
    """``n`` equally spaced thresholds on ``interval`` (default ``[-k, k]``), endpoints included."""
    lo, hi = (-k, k) if interval is None else interval
    if n < 1:
        raise ConfigError("need at least one threshold")
    if n > 1 and not hi > lo:
        raise ConfigError(f"threshold interval [{lo}, {hi}] is empty")
    return tuple(np.linspace(lo, hi, n).tolist()) if n > 1 else (0.5 * (lo + hi),)


@dataclass(frozen=True)
class MMRProblem:
    sigma: float
    k: float
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ConfigError("sigma must be positive")
        if not self.k >= 0.0:
            raise ConfigError("k must be nonnegative")
        object.__setattr__(self, "thresholds", _thresholds(self.thresholds))

    @classmethod
    def with_grid(
        cls,
        sigma: float,
        k: float,
        n_thresholds: int = 500,
        interval: tuple[float, float] | None = None,
    ) -> "MMRProblem":
        return cls(sigma, k, threshold_grid(n_thresholds, k, interval))

    @property
    def c(self) -> np.ndarray:
        return np.array(self.thresholds)

    @property
    def I(self) -> int:
        return len(self.thresholds)

    def risk_bound(self) -> float:
        return mmr_risk_bound(self.sigma, self.k, max(abs(c) for c in self.thresholds))


@dataclass(frozen=True)
class RobustBayesProblem:
    sigma: float
    k: float
    mu_bar: float
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ConfigError("sigma must be positive")
        if not self.k > 0.0:
            raise ConfigError("k must be positive")
        if not self.mu_bar > 0.0:
            raise ConfigError("mu_bar must be positive")
        object.__setattr__(self, "thresholds", _thresholds(self.thresholds))

    @classmethod
    def with_grid(
        cls,
        sigma: float,
        k: float,
        mu_bar: float,
        n_thresholds: int = 500,
        interval: tuple[float, float] | None = None,
    ) -> "RobustBayesProblem":
        return cls(sigma, k, mu_bar, threshold_grid(n_thresholds, k, interval))

    @property
    def prior_support(self) -> tuple[float, float]:
        return (self.mu_bar, -self.mu_bar)

    @property
    def prior_weights(self) -> tuple[float, float]:
        return (0.5, 0.5)

    @property
    def c(self) -> np.ndarray:
        return np.array(self.thresholds)

    @property
    def I(self) -> int:
        return len(self.thresholds)

    def risk_bound(self) -> float:
        return mmr_risk_bound(self.sigma, self.k, max(abs(c) for c in self.thresholds))


# --------------------------------------------------------------------------
# Risk and bounds
# --------------------------------------------------------------------------


def is_feasible(theta: ThetaMMR, k: float) -> bool:
    return abs(theta.mu - theta.mu_star) <= k + 1e-9


def threshold_risk(c, theta: ThetaMMR, sigma: float):
    """Expected regret of ``1{mu_hat >= c}`` at ``(mu, mu_star)``; vectorized over ``c``."""
    mu, mu_star = theta
    treat_prob = ndtr((mu - np.asarray(c, dtype=float)) / sigma)
    return mu_star * (float(mu_star >= 0.0) - treat_prob)


def mmr_risk_bound(sigma: float, k: float, threshold_extent: float | None = None) -> float:
    """Largest worst-case regret of any threshold rule with ``|c| <= threshold_extent``.

    Equals ``sigma * max_{x >= 0} x * Phi((extent + k)/sigma - x)``; with the
    default extent ``k`` this is ``sigma * max x Phi(2k/sigma - x)``.  The
    objective is log-concave, so golden-section search finds the maximum.
    """
    if not sigma > 0.0 or k < 0.0:
        raise ConfigError("need sigma > 0 and k >= 0")
    extent = k if threshold_extent is None else threshold_extent
    a = (extent + k) / sigma
    _, best = golden_section_max(lambda x: x * float(ndtr(a - x)), 0.0, max(a, 0.0) + 10.0, 1e-12)
    return sigma * best


# --------------------------------------------------------------------------
# Minimax-regret oracle
# --------------------------------------------------------------------------


class MMROracle:
    """Nature's worst-case ``(mu, mu_star)`` for a mixture over threshold rules.

    For ``mu_star >= 0`` the worst ``mu`` is ``mu_star - k`` and the mixture
    regret is ``y * sum_i p_i Phi((c_i + k - y)/sigma)`` at ``y = mu_star``;
    ``mu_star <= 0`` mirrors this with ``c -> -c``.  Each branch is searched on
    a dense grid over ``[0, max|c| + k + 10 sigma]`` and polished by
    golden-section search around the best grid point.

    The declared slack uses a curvature bound ``K`` on the branch objective:
    the true maximum is at most ``best grid value + K * h^2 / 8`` for grid
    spacing ``h``.
    """

    def __init__(self, problem: MMRProblem | RobustBayesProblem, grid_size: int = 4096) -> None:
        self.problem = problem
        sigma, k = problem.sigma, problem.k
        c = problem.c
        self._offsets = (c + k, -c + k)
        upper = float(np.max(np.abs(c))) + k + 10.0 * sigma
        self._grid = np.linspace(0.0, upper, grid_size)
        y = self._grid[:, None]
        self._tables = tuple(ndtr((a[None, :] - y) / sigma) for a in self._offsets)
        spacing = self._grid[1] - self._grid[0]
        curvature = 2.0 * PHI_AT_ZERO / sigma + upper * PHI_PRIME_MAX / sigma**2
        self._grid_slack = curvature * spacing**2 / 8.0

    def _branch(self, p: np.ndarray, which: int) -> tuple[float, float, float]:
        sigma = self.problem.sigma
        offsets, table, grid = self._offsets[which], self._tables[which], self._grid
        values = grid * (table @ p)
        j = int(np.argmax(values))
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]

        def objective(y: float) -> float:
            return y * float(p @ ndtr((offsets - y) / sigma))

        y_star, v_star = golden_section_max(objective, lo, hi, 1e-10)
        if v_star < values[j]:
            y_star, v_star = float(grid[j]), float(values[j])
        slack = max(0.0, float(values[j]) + self._grid_slack - v_star)
        return y_star, v_star, slack

    def __call__(self, p: np.ndarray) -> OracleResponse:
        p = np.asarray(p, dtype=float)
        k = self.problem.k
        y_pos, v_pos, d_pos = self._branch(p, 0)
        y_neg, v_neg, d_neg = self._branch(p, 1)
        if v_pos >= v_neg - TIE_TOL:
            theta = ThetaMMR(y_pos - k, y_pos)
        else:
            theta = ThetaMMR(-y_neg + k, -y_neg)
        risks = threshold_risk(self.problem.c, theta, self.problem.sigma)
        theta_id = (round(theta.mu, THETA_DECIMALS), round(theta.mu_star, THETA_DECIMALS))
        return OracleResponse.from_risks(theta_id, risks, p, max(d_pos, d_neg) + TIE_TOL)


@lru_cache(maxsize=4)
def _cached_mmr_oracle(problem: MMRProblem) -> MMROracle:
    return MMROracle(problem)


def mmr_oracle(p: np.ndarray, prob: MMRProblem) -> OracleResponse:
    return _cached_mmr_oracle(prob)(p)


def mixture_regret(p: np.ndarray, theta: ThetaMMR, prob: MMRProblem | RobustBayesProblem) -> float:
    return float(np.dot(p, threshold_risk(prob.c, theta, prob.sigma)))


# --------------------------------------------------------------------------
# Exact minimax-regret baseline
# --------------------------------------------------------------------------


def rho_star(sigma: float, k: float) -> float:
    """Ramp half-width of the minimax-regret rule: root of
    ``rho/(2k) - 1/2 + Phi(-rho/sigma) = 0`` on ``(0, k)``.

    Requires ``k > sigma * sqrt(pi/2)``.  The left side vanishes at zero,
    dips below zero, and is convex on ``rho > 0``; bisection starts from its
    minimizer.
    """
    if not sigma > 0.0:
        raise ConfigError("sigma must be positive")
    if not k > sigma * math.sqrt(math.pi / 2.0):
        raise ConfigError(
            f"k={k} is outside the regime k > sigma*sqrt(pi/2) = {sigma * math.sqrt(math.pi / 2):.6g}"
        )

    def f(rho: float) -> float:
        return rho / (2.0 * k) - 0.5 + float(ndtr(-rho / sigma))

    rho_min = sigma * math.sqrt(2.0 * math.log(2.0 * k * PHI_AT_ZERO / sigma))
    return bisect_root(f, rho_min, k, ftol=1e-10)


def mmr_minimax_value(sigma: float, k: float) -> float:
    """Minimax regret over all rules, ``k/2`` when ``k >= sigma sqrt(pi/2)``."""
    if k < sigma * math.sqrt(math.pi / 2.0):
        raise ConfigError("closed-form minimax regret needs k >= sigma*sqrt(pi/2)")
    return k / 2.0


def mqs_rule(mu_hat, rho: float):
    """Linear ramp from 0 at ``-rho`` to 1 at ``rho``; vectorized over ``mu_hat``."""
    if not rho > 0.0:
        raise ConfigError("rho must be positive")
    return np.clip((np.asarray(mu_hat, dtype=float) + rho) / (2.0 * rho), 0.0, 1.0)


def ramp_treatment_probability(mu, rho: float, sigma: float):
    """``E_mu[ramp(mu_hat)]`` for ``mu_hat ~ N(mu, sigma^2)`` and the ramp on ``[-rho, rho]``."""
    mu = np.asarray(mu, dtype=float)

    def antideriv(t):
        z = t / sigma
        return t * ndtr(z) + sigma * np.exp(-0.5 * z * z) * PHI_AT_ZERO

    return (antideriv(mu + rho) - antideriv(mu - rho)) / (2.0 * rho)


def ramp_worst_case_regret(rho: float, sigma: float, k: float) -> float:
    """Worst-case regret of the ramp rule over ``|mu - mu_star| <= k``.

    The rule is symmetric, so only ``mu_star >= 0`` (with ``mu = mu_star - k``)
    needs searching.
    """
    upper = 2.0 * k + rho + 12.0 * sigma
    grid = np.linspace(0.0, upper, 20001)
    vals = grid * (1.0 - ramp_treatment_probability(grid - k, rho, sigma))
    j = int(np.argmax(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    _, best = golden_section_max(
        lambda y: y * (1.0 - float(ramp_treatment_probability(y - k, rho, sigma))), lo, hi, 1e-12
    )
    return max(best, float(vals[j]))


# --------------------------------------------------------------------------
# Robust Bayes (two-point prior) oracle and baseline
# --------------------------------------------------------------------------


def rb_mu_star(mu: float, p: np.ndarray, prob: RobustBayesProblem) -> float:
    """Nature's worst ``mu_star`` in ``[mu - k, mu + k]`` given ``mu``.

    The mixture regret is convex piecewise linear in ``mu_star``, so one of
    the endpoints wins; ``mu + k`` iff ``(mu + k)/(2k) >= sum_i p_i Phi((mu - c_i)/sigma)``.
    """
    treat_prob = float(np.dot(p, ndtr((mu - prob.c) / prob.sigma)))
    k = prob.k
    return mu + k if mu + k >= 2.0 * k * treat_prob else mu - k


def _rb_pair(mu: float, p: np.ndarray, prob: RobustBayesProblem) -> tuple[ThetaMMR, np.ndarray]:
    theta = ThetaMMR(mu, rb_mu_star(mu, p, prob))
    return theta, threshold_risk(prob.c, theta, prob.sigma)


def rb_oracle(p: np.ndarray, prob: RobustBayesProblem) -> OracleResponse:
    """Worst-case prior for ``p``: the fixed ``mu`` marginal with ``mu_star | mu``
    a point mass at its worst value.  Exact, so ``delta = 0``."""
    p = np.asarray(p, dtype=float)
    (theta_a, risk_a), (theta_b, risk_b) = (_rb_pair(mu, p, prob) for mu in prob.prior_support)
    risks = 0.5 * risk_a + 0.5 * risk_b
    theta_id = tuple(
        (round(t.mu, THETA_DECIMALS), round(t.mu_star, THETA_DECIMALS)) for t in (theta_a, theta_b)
    )
    return OracleResponse.from_risks(theta_id, risks, p)


def rb_gradient_sampler(
    p: np.ndarray, prob: RobustBayesProblem, rng: np.random.Generator
) -> OracleResponse:
    """Unbiased single-draw subgradient: draw ``mu`` from the prior, then use
    its worst ``mu_star``."""
    p = np.asarray(p, dtype=float)
    mu = prob.mu_bar if rng.random() < 0.5 else -prob.mu_bar
    theta, risks = _rb_pair(mu, p, prob)
    theta_id = (round(theta.mu, THETA_DECIMALS), round(theta.mu_star, THETA_DECIMALS))
    return OracleResponse.from_risks(theta_id, risks, p)


def _rb_root_function(prob: RobustBayesProblem, nodes: np.ndarray, weights: np.ndarray):
    sigma, mu_bar, k = prob.sigma, prob.mu_bar, prob.k
    shift = mu_bar**2 / sigma**2
    scale = mu_bar / sigma
    target = (k - mu_bar) / (2.0 * k)

    def f(rho: float) -> float:
        return float(weights @ ndtr((2.0 * rho * nodes - rho - shift) / scale)) - target

    return f


def rb_rho_star(prob: RobustBayesProblem, quad_points: int = 129) -> tuple[float, float]:
    """Ramp parameter of the two-point-prior robust Bayes rule.

    Solves ``int_0^1 Phi((2 rho x - rho - mu_bar^2/sigma^2) / (mu_bar/sigma)) dx
    = (k - mu_bar) / (2k)``, i.e. the ramp's treatment probability at
    ``mu = -mu_bar`` hits its optimal level.  Returns ``rho`` and the ramp
    half-width on the ``mu_hat`` scale, ``sigma^2 rho / mu_bar``.
    """
    nodes, weights = gauss_legendre_unit(quad_points)
    f = _rb_root_function(prob, nodes, weights)
    lo, hi = 0.0, 1.0
    if f(lo) >= 0.0:
        raise ConfigError("robust Bayes ramp equation has no positive root for these parameters")
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigError("robust Bayes ramp equation has no root (target >= 1/2)")
    rho = bisect_root(f, lo, hi, ftol=1e-12)
    return rho, prob.sigma**2 * rho / prob.mu_bar


def rb_worst_case_bayes_risk(treat_prob_at, prob: RobustBayesProblem) -> float:
    """Worst-case Bayes regret of a rule given its treatment probability
    function ``mu -> P_mu(treat)``, over priors with the two-point marginal."""
    k = prob.k
    total = 0.0
    for mu, w in zip(prob.prior_support, prob.prior_weights):
        e = float(treat_prob_at(mu))
        total += w * max(ms * (float(ms >= 0.0) - e) for ms in (mu - k, mu + k))
    return total


def rb_minimax_value(prob: RobustBayesProblem) -> float:
    """Value of the ex-ante robust Bayes problem over all rules, via the ramp
    rule's worst-case Bayes risk."""
    _, half_width = rb_rho_star(prob)
    return rb_worst_case_bayes_risk(
        lambda mu: ramp_treatment_probability(mu, half_width, prob.sigma), prob
    )


def induced_action(p: np.ndarray, thresholds: Sequence[float], mu_hat) -> np.ndarray:
    """Treatment probability of the randomized rule ``sum_i p_i 1{mu_hat >= c_i}``."""
    mu_hat = np.atleast_1d(np.asarray(mu_hat, dtype=float))
    c = np.asarray(thresholds, dtype=float)
    return (mu_hat[:, None] >= c[None, :]).astype(float) @ np.asarray(p, dtype=float)
