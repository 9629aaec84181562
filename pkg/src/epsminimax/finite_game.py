"""Finite two-player zero-sum games: the exactly solvable test bed.

Rows are the statistician's decision rules, columns are nature's states, and
entries are risks in ``[0, M]``.  The exact minimax solution comes from a
small dense simplex method; the Hedge engine and its mirror-ascent dual are
checked against it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .hedge import ConfigError, NumericalFailure, OracleResponse, compute_schedule

LP_RESIDUAL_TOL = 1e-9
_PIVOT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MatrixGame:
    risk: np.ndarray
    M: float

    def __post_init__(self) -> None:
        risk = np.array(self.risk, dtype=float)
        if risk.ndim != 2 or 0 in risk.shape:
            raise ConfigError("risk matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(risk)):
            raise ConfigError("risk matrix has non-finite entries")
        if not self.M > 0.0:
            raise ConfigError("M must be positive")
        if risk.min() < 0.0 or risk.max() > self.M:
            raise ConfigError(
                f"risk entries span [{risk.min():.6g}, {risk.max():.6g}], outside [0, {self.M}]"
            )
        risk.setflags(write=False)
        object.__setattr__(self, "risk", risk)

    @property
    def I(self) -> int:
        return self.risk.shape[0]

    @property
    def J(self) -> int:
        return self.risk.shape[1]

    def scaled(self, alpha: float) -> "MatrixGame":
        return MatrixGame(alpha * self.risk, alpha * self.M)

    def oracle(self):
        return partial(matrix_oracle, game=self)

    @classmethod
    def from_csv(cls, path: str | Path, M: float | None = None) -> "MatrixGame":
        """Read a headerless CSV matrix (rows = decision rules, columns = states)."""
        rows: list[list[float]] = []
        try:
            with open(path, newline="") as fh:
                lines = list(csv.reader(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read matrix {path}: {exc}") from None
        for lineno, row in enumerate(lines, start=1):
            cells = [c.strip() for c in row]
            if not any(cells):
                continue
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if not rows or len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{path}: expected a rectangular numeric matrix")
        risk = np.array(rows)
        if M is None:
            M = float(risk.max()) if risk.max() > 0.0 else 1.0
        return cls(risk, M)


class LPSolution(NamedTuple):
    p: np.ndarray
    value: float
    q: np.ndarray


def _simplex_max(A: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Maximize ``c.x`` subject to ``A x <= b``, ``x >= 0``, with ``b >= 0``.

    Dense tableau, Bland's rule.  Returns the primal ``x`` and dual ``y``.
    """
    m, n = A.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n : n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = list(range(n, n + m))

    max_pivots = 50 * (m + n) + 100
    for _ in range(max_pivots):
        obj = tab[m, :-1]
        candidates = np.flatnonzero(obj < -_PIVOT_TOL)
        if candidates.size == 0:
            break
        j = int(candidates[0])
        col = tab[:m, j]
        rows = np.flatnonzero(col > _PIVOT_TOL)
        if rows.size == 0:
            raise NumericalFailure("LP is unbounded; the game matrix is malformed")
        ratios = tab[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + _PIVOT_TOL * max(1.0, abs(best))]
        i = int(min(ties, key=lambda r: basis[r]))
        tab[i] /= tab[i, j]
        for r in range(m + 1):
            if r != i and tab[r, j] != 0.0:
                tab[r] -= tab[r, j] * tab[i]
        basis[i] = j
    else:
        raise NumericalFailure("simplex method exceeded its pivot budget")

    x = np.zeros(n + m)
    x[basis] = tab[:m, -1]
    y = tab[m, n : n + m].copy()
    return x[:n], y


def lp_minimax(game: MatrixGame) -> LPSolution:
    """Exact minimax mixture ``p``, value, and maximin mixture ``q``.

    Shifts the matrix to be strictly positive and solves
    ``max 1.u  s.t.  A^T u <= 1, u >= 0``; then ``p = u / sum(u)`` and the
    dual gives nature's ``q``.
    """
    risk = game.risk
    shift = 1.0 - float(risk.min())
    A = risk + shift
    u, y = _simplex_max(A.T, np.ones(game.J), np.ones(game.I))
    total = float(u.sum())
    if not (total > 0.0 and math.isfinite(total)):
        raise NumericalFailure("LP returned a degenerate solution")
    value = 1.0 / total - shift
    p = np.clip(u / total, 0.0, None)
    q = np.clip(y / float(y.sum()), 0.0, None)
    p /= p.sum()
    q /= q.sum()

    worst = float((p @ risk).max())
    best = float((risk @ q).min())
    if worst - value > LP_RESIDUAL_TOL or value - best > LP_RESIDUAL_TOL:
        raise NumericalFailure(
            f"LP residuals too large: max_j p.A - v = {worst - value:.3g}, "
            f"v - min_i A q = {value - best:.3g}"
        )
    return LPSolution(p, value, q)


def matrix_oracle(p: np.ndarray, game: MatrixGame) -> OracleResponse:
    """Nature's best column against ``p`` (lowest index on ties)."""
    p = np.asarray(p, dtype=float)
    j = int(np.argmax(p @ game.risk))
    return OracleResponse.from_risks(j, game.risk[:, j], p)


def bayes_response(q: np.ndarray, game: MatrixGame) -> int:
    """Statistician's best row against nature's mixture ``q`` (lowest index on ties)."""
    return int(np.argmin(game.risk @ np.asarray(q, dtype=float)))


def epsilon_maximin_check(
    q: np.ndarray, game: MatrixGame, v_ref: float, epsilon: float
) -> bool:
    """True iff ``q`` guarantees nature at least ``v_ref - epsilon``.

    The infimum over the simplex of a linear form sits at a vertex, so it is
    enough to check the best pure row.
    """
    return float((game.risk @ np.asarray(q, dtype=float)).min()) >= v_ref - epsilon - 1e-9


def lfd_to_column_distribution(lfd: Sequence[tuple[int, float]], J: int) -> np.ndarray:
    q = np.zeros(J)
    for j, prob in lfd:
        q[int(j)] += prob
    return q


def epsilon_star(game: MatrixGame, p: np.ndarray, q: np.ndarray) -> float:
    """Ex-post accuracy ``f(p) - min_i E_q[row i]`` of a (p, q) pair."""
    return float((np.asarray(p) @ game.risk).max() - (game.risk @ np.asarray(q)).min())


@dataclass(frozen=True, eq=False)
class MaximinResult:
    q: np.ndarray
    p_empirical: np.ndarray
    lower: float
    upper: float
    value_estimate: float
    epochs: int


def mirror_ascent_maximin(
    game: MatrixGame, epsilon: float, M: float | None = None
) -> MaximinResult:
    """Nature's epsilon-maximin mixture by mirror ascent over the columns.

    Each epoch the statistician plays a Bayes response to ``q_t`` and the
    column weights grow with that row's risks.  ``lower`` is the best row's
    risk against the averaged ``q``; ``upper`` is the worst column against the
    empirical distribution of the statistician's responses.
    """
    M = game.M if M is None else M
    eta, T = compute_schedule(epsilon, M, game.J)
    risk = game.risk
    if T == 0:
        q = np.ones(game.J)
        i = bayes_response(q, game)
        value = float(risk[i, 0])
        p_emp = np.zeros(game.I)
        p_emp[i] = 1.0
        return MaximinResult(q, p_emp, value, value, value, 0)

    log_w = np.zeros(game.J)
    sum_q = np.zeros(game.J)
    counts = np.zeros(game.I)
    achieved = 0.0
    for _ in range(T):
        w = np.exp(log_w - log_w.max())
        q = w / w.sum()
        row_risks = risk @ q
        i = int(np.argmin(row_risks))
        achieved += float(row_risks[i])
        sum_q += q
        counts[i] += 1
        log_w += eta * risk[i]

    q_bar = sum_q / T
    q_bar /= q_bar.sum()
    p_emp = counts / T
    lower = float((risk @ q_bar).min())
    upper = float((p_emp @ risk).max())
    return MaximinResult(q_bar, p_emp, lower, upper, achieved / T, T)


def random_game(rng: np.random.Generator, max_rows: int = 8, max_cols: int = 8) -> MatrixGame:
    """Entries i.i.d. uniform on [0, 1], dimensions uniform on 2..max."""
    I = int(rng.integers(2, max_rows + 1))
    J = int(rng.integers(2, max_cols + 1))
    return MatrixGame(rng.uniform(0.0, 1.0, size=(I, J)), 1.0)


def random_games(n: int, seed: int, max_rows: int = 8, max_cols: int = 8) -> list[MatrixGame]:
    rng = np.random.default_rng(seed)
    return [random_game(rng, max_rows, max_cols) for _ in range(n)]
