"""Hedge / mirror subgradient descent over a finite menu of decision rules.

The statistician mixes over ``I`` rules with a probability vector ``p``.
Each epoch asks nature's oracle for a (near) worst-case parameter at the
current mixture, takes that parameter's risk column as the subgradient and
applies the multiplicative-weights update.  The Polyak average of the
iterates is the returned epsilon-minimax rule; the empirical distribution of
the oracle's answers is an epsilon-maximin (least favorable) distribution.

Everything here is problem-agnostic: a problem plugs in through any callable
``oracle(p) -> OracleResponse``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Protocol, Sequence

import numpy as np

SIMPLEX_ATOL = 1e-12
RISK_ATOL = 1e-9


class HedgeError(Exception):
    """Base class for solver errors."""


class ConfigError(HedgeError, ValueError):
    """Invalid solver or problem configuration."""


class OracleContractError(HedgeError):
    """An oracle returned a risk vector violating the declared bound ``[0, M]``."""


class NumericalFailure(HedgeError, ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


def _frozen_array(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SimplexPoint:
    """A probability vector over the decision rules."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = _frozen_array(self.weights)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("simplex point must be a non-empty 1-D vector")
        if not np.all(np.isfinite(w)):
            raise NumericalFailure("simplex point has non-finite entries")
        if np.any(w < 0.0):
            raise ValueError("simplex point has negative entries")
        if abs(float(w.sum()) - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"simplex point sums to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, size: int) -> "SimplexPoint":
        return cls(np.full(size, 1.0 / size))

    def __len__(self) -> int:
        return int(self.weights.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SimplexPoint):
            return NotImplemented
        return bool(np.array_equal(self.weights, other.weights))

    def __hash__(self) -> int:
        return hash(self.weights.tobytes())


@dataclass(frozen=True, eq=False)
class LogWeights:
    """Multiplicative weights kept on the natural-log scale.

    ``log_w`` at epoch ``t`` is ``-eta * (g_1 + ... + g_t)``; the initial
    weights are all one, i.e. ``log_w = 0``.
    """

    log_w: np.ndarray
    epoch: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "log_w", _frozen_array(self.log_w))

    @classmethod
    def initial(cls, size: int) -> "LogWeights":
        return cls(np.zeros(size), 0)


@dataclass(frozen=True, eq=False)
class OracleResponse:
    """Nature's answer at a mixture ``p``.

    ``delta`` is the oracle's declared slack: the true worst-case risk of ``p``
    is at most ``achieved_value + delta``.  Oracles that cannot bound their
    slack (local searches) set ``certified=False``.
    """

    theta_id: Hashable
    risk_vector: np.ndarray
    achieved_value: float
    delta: float = 0.0
    certified: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "risk_vector", _frozen_array(self.risk_vector))
        if self.delta < 0.0:
            raise ValueError("oracle slack must be nonnegative")

    @classmethod
    def from_risks(
        cls,
        theta_id: Hashable,
        risks: Any,
        p: np.ndarray,
        delta: float = 0.0,
        certified: bool = True,
    ) -> "OracleResponse":
        risks = np.asarray(risks, dtype=float)
        return cls(theta_id, risks, float(np.dot(p, risks)), float(delta), certified)


class RiskOracle(Protocol):
    """Nature's best-response oracle: mixture in, worst-case risk column out."""

    def __call__(self, p: np.ndarray) -> OracleResponse: ...


Sampler = Callable[[np.ndarray, np.random.Generator], OracleResponse]


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float
    M: float
    I: int
    max_epochs_override: int | None = None
    early_stop: bool = False
    gap_check_period: int = 50
    seed: int = 0
    # full p_t / g_t vectors are kept only for the most recent epochs
    trace_window: int | None = 1000

    def __post_init__(self) -> None:
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon!r}")
        if not (math.isfinite(self.M) and self.M > 0.0):
            raise ConfigError(f"risk bound M must be positive, got {self.M!r}")
        if self.epsilon > self.M:
            raise ConfigError(
                f"epsilon={self.epsilon} exceeds M={self.M}; the guarantee needs epsilon <= M"
            )
        if int(self.I) != self.I or self.I < 1:
            raise ConfigError(f"I must be a positive integer, got {self.I!r}")
        if self.max_epochs_override is not None and self.max_epochs_override < 1:
            raise ConfigError("max_epochs_override must be >= 1")
        if self.gap_check_period < 1:
            raise ConfigError("gap_check_period must be >= 1")
        if self.trace_window is not None and self.trace_window < 0:
            raise ConfigError("trace_window must be nonnegative")


@dataclass(frozen=True, eq=False)
class EpochRecord:
    epoch: int
    achieved_value: float
    theta_id: Hashable
    delta: float
    p: np.ndarray | None
    g: np.ndarray | None


class Trace:
    """Per-epoch history of a run.

    Scalars (achieved value, theta, slack) are kept for every epoch.  Running
    sums of ``p_t`` and ``g_t`` are kept incrementally, so certificates cost
    O(I) memory; full vectors are kept only for the last ``window`` epochs.
    """

    def __init__(self, size: int, window: int | None = None) -> None:
        self.size = size
        self.window = window
        self.achieved: list[float] = []
        self.theta_ids: list[Hashable] = []
        self.deltas: list[float] = []
        self.gap_checks: list[tuple[int, float, float]] = []
        self.sum_p = np.zeros(size)
        self.sum_g = np.zeros(size)
        self.sum_achieved = 0.0
        self._vectors: deque[tuple[int, np.ndarray, np.ndarray]] = deque(maxlen=window)

    def append(
        self,
        p: np.ndarray,
        g: np.ndarray,
        achieved: float,
        theta_id: Hashable,
        delta: float = 0.0,
    ) -> None:
        self.achieved.append(achieved)
        self.theta_ids.append(theta_id)
        self.deltas.append(delta)
        self.sum_p += p
        self.sum_g += g
        self.sum_achieved += achieved
        if self.window != 0:
            self._vectors.append((len(self.achieved), p.copy(), g.copy()))

    def record_gap(self, epoch: int, lower: float, upper: float) -> None:
        self.gap_checks.append((epoch, lower, upper))

    def __len__(self) -> int:
        return len(self.achieved)

    @property
    def mean_p(self) -> np.ndarray:
        return self.sum_p / len(self)

    @property
    def mean_risks(self) -> np.ndarray:
        """Per-rule average risk ``(1/T) sum_t R(d_i, theta_t)``."""
        return self.sum_g / len(self)

    def vectors(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        """``(epoch, p_t, g_t)`` for the epochs still inside the window."""
        return list(self._vectors)

    def records(self) -> Iterable[EpochRecord]:
        stored = {t: (p, g) for t, p, g in self._vectors}
        for t, (val, theta, delta) in enumerate(
            zip(self.achieved, self.theta_ids, self.deltas), start=1
        ):
            p, g = stored.get(t, (None, None))
            yield EpochRecord(t, val, theta, delta, p, g)


@dataclass(frozen=True)
class SolverResult:
    p_epsilon: SimplexPoint
    lfd_support: tuple[tuple[Hashable, int], ...]
    v_bar_epsilon: float
    lower_bound: float
    upper_bound: float
    epochs_run: int
    scheduled_epochs: int
    eta: float
    delta_max: float
    certified: bool
    in_expectation: bool
    stopped_early: bool
    config: SolverConfig
    trace: Trace | None = field(default=None, compare=False, repr=False)

    @property
    def gap(self) -> float:
        return self.upper_bound - self.lower_bound

    def lfd(self) -> list[tuple[Hashable, float]]:
        total = sum(count for _, count in self.lfd_support)
        return [(theta, count / total) for theta, count in self.lfd_support]


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def compute_schedule(epsilon: float, M: float, I: int) -> tuple[float, int]:
    """Step size ``eta = eps / M^2`` and epoch count ``T = ceil(2 M^2 ln I / eps^2)``."""
    if not (epsilon > 0.0 and M > 0.0):
        raise ConfigError("epsilon and M must be positive")
    if epsilon > M:
        raise ConfigError(f"epsilon={epsilon} exceeds M={M}")
    if I < 1:
        raise ConfigError("I must be >= 1")
    eta = epsilon / M**2
    if I == 1:
        return eta, 0
    T = math.ceil(2.0 * M**2 * math.log(I) / epsilon**2)
    return eta, int(T)


def update_weights(lw: LogWeights, g: np.ndarray, eta: float) -> LogWeights:
    return LogWeights(lw.log_w - eta * np.asarray(g, dtype=float), lw.epoch + 1)


def normalize(lw: LogWeights) -> SimplexPoint:
    """Exponentiate and normalize with a max shift, so nothing overflows."""
    log_w = lw.log_w
    if not np.all(np.isfinite(log_w)):
        raise NumericalFailure(f"non-finite log-weights at epoch {lw.epoch}")
    w = np.exp(log_w - log_w.max())
    return SimplexPoint(w / w.sum())


def value_estimate(trace: Trace) -> float:
    """Running average of the achieved values ``p_t . g_t``."""
    if len(trace) == 0:
        raise ValueError("value estimate needs a non-empty trace")
    return trace.sum_achieved / len(trace)


def duality_gap(
    trace: Trace, oracle: RiskOracle, p_bar: SimplexPoint
) -> tuple[float, float]:
    """Certified bracket ``lower <= v_bar <= upper`` at the current round.

    ``lower`` is the best rule's average risk against the empirical
    distribution of nature's answers.  ``upper`` is a fresh oracle call at
    ``p_bar`` widened by the oracle's declared slack.
    """
    if len(trace) == 0:
        raise ValueError("duality gap needs at least one epoch")
    lower = float(trace.mean_risks.min())
    resp = oracle(p_bar.weights)
    upper = float(np.dot(p_bar.weights, resp.risk_vector)) + resp.delta
    return lower, upper


def early_stop_check(lower: float, upper: float, epsilon: float) -> bool:
    return upper - lower <= epsilon


def extract_lfd(trace: Trace) -> list[tuple[Hashable, float]]:
    """Empirical distribution of nature's responses, in order of first appearance."""
    counts = _count_thetas(trace.theta_ids)
    T = len(trace)
    return [(theta, n / T) for theta, n in counts]


def _count_thetas(theta_ids: Sequence[Hashable]) -> list[tuple[Hashable, int]]:
    counts: dict[Hashable, int] = {}
    for theta in theta_ids:
        counts[theta] = counts.get(theta, 0) + 1
    return list(counts.items())


def regret_inequality_check(trace: Trace, eta: float, M: float, I: int) -> float:
    """Largest violation over rules of the Hedge regret inequality.

    For every rule ``i``::

        (1/T) sum_t p_t.g_t <= (1/T) sum_t g_{i,t} + M^2 eta / 2 + ln(I) / (T eta)

    Returns ``max_i (LHS - RHS_i)``; nonpositive whenever every ``g_t`` lies
    in ``[0, M]^I``.
    """
    T = len(trace)
    if T == 0:
        raise ValueError("regret check needs a non-empty trace")
    lhs = trace.sum_achieved / T
    rhs = trace.sum_g / T + M**2 * eta / 2.0 + math.log(I) / (T * eta)
    return float(np.max(lhs - rhs))


def replay_hedge(
    risks: Iterable[Sequence[float]], eta: float, window: int | None = None
) -> Trace:
    """Run the weight update on a fixed sequence of risk vectors.

    No bound checks are applied; useful for auditing the update law and the
    regret inequality on arbitrary (even adversarial) sequences.
    """
    seq = [np.asarray(g, dtype=float) for g in risks]
    if not seq:
        raise ValueError("empty risk sequence")
    lw = LogWeights.initial(seq[0].size)
    trace = Trace(seq[0].size, window)
    for t, g in enumerate(seq):
        p = normalize(lw).weights
        trace.append(p, g, float(np.dot(p, g)), t)
        lw = update_weights(lw, g, eta)
    return trace


def _checked_risks(resp: OracleResponse, I: int, M: float, epoch: int) -> np.ndarray:
    g = resp.risk_vector
    if g.shape != (I,):
        raise OracleContractError(
            f"epoch {epoch}: oracle returned {g.shape} risks for {I} rules"
        )
    if not np.all(np.isfinite(g)):
        raise NumericalFailure(f"epoch {epoch}: oracle returned non-finite risks")
    lo, hi = float(g.min()), float(g.max())
    if lo < -RISK_ATOL or hi > M + RISK_ATOL:
        raise OracleContractError(
            f"epoch {epoch}: oracle risks span [{lo:.6g}, {hi:.6g}], outside [0, M={M:.6g}]"
        )
    return g


def _run(
    respond: Callable[[np.ndarray], OracleResponse],
    evaluator: RiskOracle | None,
    config: SolverConfig,
    *,
    allow_early_stop: bool,
    in_expectation: bool,
) -> SolverResult:
    I, M, eps = int(config.I), config.M, config.epsilon
    eta, T_sched = compute_schedule(eps, M, I)

    if I == 1:
        p = np.ones(1)
        resp = respond(p)
        g = _checked_risks(resp, 1, M, 0)
        value = float(g[0])
        return SolverResult(
            p_epsilon=SimplexPoint(p),
            lfd_support=((resp.theta_id, 1),),
            v_bar_epsilon=value,
            lower_bound=value,
            upper_bound=value + resp.delta,
            epochs_run=0,
            scheduled_epochs=0,
            eta=eta,
            delta_max=resp.delta,
            certified=resp.certified,
            in_expectation=in_expectation,
            stopped_early=False,
            config=config,
            trace=None,
        )

    T = config.max_epochs_override or T_sched
    lw = LogWeights.initial(I)
    trace = Trace(I, config.trace_window)
    delta_max = 0.0
    certified = True
    stopped_early = False
    last_check: tuple[int, float, float] | None = None

    for t in range(1, T + 1):
        p = normalize(lw).weights
        resp = respond(p)
        g = _checked_risks(resp, I, M, t)
        trace.append(p, g, float(np.dot(p, g)), resp.theta_id, resp.delta)
        delta_max = max(delta_max, resp.delta)
        certified = certified and resp.certified
        lw = update_weights(lw, g, eta)

        if allow_early_stop and config.early_stop and t % config.gap_check_period == 0:
            lower, upper = _bracket(trace, evaluator)
            trace.record_gap(t, lower, upper)
            last_check = (t, lower, upper)
            if early_stop_check(lower, upper, eps):
                stopped_early = t < T
                break

    p_bar = SimplexPoint(_renormalized(trace.mean_p))
    if last_check is not None and last_check[0] == len(trace):
        _, lower, upper = last_check
    else:
        lower, upper = _bracket(trace, evaluator, p_bar)
        if not math.isnan(upper):
            trace.record_gap(len(trace), lower, upper)

    return SolverResult(
        p_epsilon=p_bar,
        lfd_support=tuple(_count_thetas(trace.theta_ids)),
        v_bar_epsilon=value_estimate(trace),
        lower_bound=lower,
        upper_bound=upper,
        epochs_run=len(trace),
        scheduled_epochs=T_sched,
        eta=eta,
        delta_max=delta_max,
        certified=certified,
        in_expectation=in_expectation,
        stopped_early=stopped_early,
        config=config,
        trace=trace,
    )


def _renormalized(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _bracket(
    trace: Trace, evaluator: RiskOracle | None, p_bar: SimplexPoint | None = None
) -> tuple[float, float]:
    if p_bar is None:
        p_bar = SimplexPoint(_renormalized(trace.mean_p))
    if evaluator is None:
        return float(trace.mean_risks.min()), math.nan
    return duality_gap(trace, evaluator, p_bar)


def hedge_solve(oracle: RiskOracle, config: SolverConfig) -> SolverResult:
    """Epsilon-minimax mixture over the rules by mirror subgradient descent.

    Runs ``T = ceil(2 M^2 ln I / eps^2)`` epochs with ``eta = eps / M^2``
    (or ``max_epochs_override`` epochs), optionally stopping as soon as the
    certified duality gap drops below ``eps``.  The returned rule satisfies
    ``sup_theta R(p_eps, theta) <= v_bar + eps + delta_max``.
    """
    return _run(oracle, oracle, config, allow_early_stop=True, in_expectation=False)


def hedge_solve_stochastic(
    sampler: Sampler, config: SolverConfig, evaluator: RiskOracle | None = None
) -> SolverResult:
    """Stochastic mirror descent driven by an unbiased subgradient sampler.

    ``sampler(p, rng)`` returns a response whose risk vector has conditional
    expectation equal to the true subgradient.  The loop is the deterministic
    one with sampled vectors, seeded from ``config.seed``; the guarantee holds
    on average over runs.  Without an exact ``evaluator`` the upper bound is
    NaN.  Early stopping is not available here.
    """
    if config.early_stop:
        raise ConfigError("early stopping is not available for the stochastic variant")
    rng = np.random.default_rng(config.seed)
    result = _run(
        lambda p: sampler(p, rng),
        evaluator,
        config,
        allow_early_stop=False,
        in_expectation=True,
    )
    return result
