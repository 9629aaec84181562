"""Choosing where to experiment when treatment effects vary smoothly across sites.

Each candidate experimental site ``s`` yields ``tau_hat_s ~ N(tau_s, sigma_s^2)``
and the policy treats every policy-relevant site iff ``tau_hat_s >= 0``.
Nature picks a treatment-effect function that is ``C``-Lipschitz in the site
covariates.  Because any Lipschitz assignment on finitely many sites extends
to the whole covariate space, nature's choice reduces to a vector of site
values satisfying the pairwise constraints ``|tau_a - tau_b| <= C d(a, b)``.

Regret of experimenting on ``s`` is the average over policy sites ``s'`` of
``tau_s' (1{tau_s' >= 0} - Phi(tau_s / sigma_s))``.  For fixed experimental
values the mixture regret is convex piecewise linear in every policy value,
so the oracle searches over the envelope endpoints with coordinate ascent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import ndtr

from ._numerics import golden_section_max_batch
from .hedge import ConfigError, NumericalFailure, OracleResponse
from .treatment import mmr_risk_bound

FEASIBILITY_TOL = 1e-7
TAU_DECIMALS = 4
DEFAULT_SIGMA = 4.5
DEFAULT_ANCHOR_TAU = 9.2
_IMPROVE_TOL = 1e-12


class SiteDataError(ConfigError):
    """Malformed site covariate file or inconsistent site configuration."""


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SiteData:
    """Covariates for all sites plus the experimental / policy split.

    ``experimental`` and ``policy`` index rows of ``covariates``; ``sigma``
    holds one noise level per experimental site, in the same order.
    """

    site_ids: tuple[str, ...]
    covariates: np.ndarray
    experimental: tuple[int, ...]
    policy: tuple[int, ...]
    sigma: np.ndarray
    C: float

    def __post_init__(self) -> None:
        X = np.array(self.covariates, dtype=float)
        if X.ndim != 2 or X.shape[0] != len(self.site_ids):
            raise SiteDataError("covariates must be a (sites x d) matrix matching site_ids")
        if not np.all(np.isfinite(X)):
            raise SiteDataError("covariates contain non-finite values")
        if len(set(self.site_ids)) != len(self.site_ids):
            raise SiteDataError("duplicate site ids")
        exp, pol = tuple(map(int, self.experimental)), tuple(map(int, self.policy))
        if not exp:
            raise SiteDataError("no experimental sites")
        if not pol:
            raise SiteDataError("no policy sites")
        if set(exp) & set(pol):
            raise SiteDataError("a site cannot be both experimental and policy-relevant")
        if len(set(exp)) != len(exp) or len(set(pol)) != len(pol):
            raise SiteDataError("repeated site index")
        if any(not 0 <= i < X.shape[0] for i in exp + pol):
            raise SiteDataError("site index out of range")
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (len(exp),)).copy()
        if not np.all(sigma > 0.0):
            raise SiteDataError("sigma must be positive for every experimental site")
        if not (math.isfinite(self.C) and self.C >= 0.0):
            raise SiteDataError("Lipschitz constant C must be finite and nonnegative")
        X.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "experimental", exp)
        object.__setattr__(self, "policy", pol)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "C", float(self.C))

    @property
    def n_experimental(self) -> int:
        return len(self.experimental)

    @property
    def n_policy(self) -> int:
        return len(self.policy)

    @cached_property
    def distances(self) -> np.ndarray:
        """Euclidean distances between all sites in the file."""
        D = cdist(self.covariates, self.covariates)
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
        D.setflags(write=False)
        return D

    @property
    def active(self) -> tuple[int, ...]:
        """Experimental sites first, then policy sites: the order of a tau vector."""
        return self.experimental + self.policy

    @cached_property
    def active_distances(self) -> np.ndarray:
        idx = np.array(self.active)
        return self.distances[np.ix_(idx, idx)]

    def experimental_names(self) -> list[str]:
        return [self.site_ids[i] for i in self.experimental]

    def policy_names(self) -> list[str]:
        return [self.site_ids[i] for i in self.policy]

    def with_policy(self, policy: Sequence[int]) -> "SiteData":
        return SiteData(self.site_ids, self.covariates, self.experimental, tuple(policy), self.sigma, self.C)

    def with_C(self, C: float) -> "SiteData":
        return SiteData(self.site_ids, self.covariates, self.experimental, self.policy, self.sigma, C)


def load_sites(path: str | Path, C: float = 0.0, sigma: float = DEFAULT_SIGMA) -> SiteData:
    """Read a site CSV: ``site_id, role, x1..xd`` and an optional ``sigma`` column.

    ``role`` is ``experimental`` or ``policy``.  A per-row ``sigma`` overrides
    the default for experimental sites; it is ignored on policy rows.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise SiteDataError(f"cannot read site file {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SiteDataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        if header[:2] != ["site_id", "role"]:
            raise SiteDataError(f"{path}: header must start with 'site_id,role'")
        cov_cols = [j for j, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        if not cov_cols:
            raise SiteDataError(f"{path}: no covariate columns (x1, x2, ...)")
        sigma_col = header.index("sigma") if "sigma" in header else None
        unknown = set(range(2, len(header))) - set(cov_cols) - {sigma_col}
        if unknown:
            raise SiteDataError(f"{path}: unexpected columns {[header[j] for j in sorted(unknown)]}")

        ids: list[str] = []
        rows: list[list[float]] = []
        experimental: list[int] = []
        policy: list[int] = []
        sigmas: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SiteDataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            site_id, role = row[0].strip(), row[1].strip().lower()
            if not site_id:
                raise SiteDataError(f"{path}:{lineno}: empty site_id")
            if site_id in ids:
                raise SiteDataError(f"{path}:{lineno}: duplicate site_id {site_id!r}")
            try:
                values = [float(row[j]) for j in cov_cols]
            except ValueError as exc:
                raise SiteDataError(f"{path}:{lineno}: {exc}") from None
            if role == "experimental":
                experimental.append(len(ids))
                s = sigma
                if sigma_col is not None and row[sigma_col].strip():
                    try:
                        s = float(row[sigma_col])
                    except ValueError as exc:
                        raise SiteDataError(f"{path}:{lineno}: {exc}") from None
                sigmas.append(s)
            elif role == "policy":
                policy.append(len(ids))
            else:
                raise SiteDataError(f"{path}:{lineno}: role must be 'experimental' or 'policy', got {role!r}")
            ids.append(site_id)
            rows.append(values)

    if not experimental:
        raise SiteDataError(f"{path}: no experimental sites")
    if not policy:
        raise SiteDataError(f"{path}: no policy sites")
    return SiteData(tuple(ids), np.array(rows), tuple(experimental), tuple(policy), np.array(sigmas), C)


def write_sites(data: SiteData, path: str | Path) -> None:
    d = data.covariates.shape[1]
    roles = {i: "experimental" for i in data.experimental} | {i: "policy" for i in data.policy}
    sigma_of = dict(zip(data.experimental, data.sigma))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "role", *[f"x{j + 1}" for j in range(d)], "sigma"])
        for i in sorted(roles):
            sigma = f"{sigma_of[i]:.17g}" if i in sigma_of else ""
            w.writerow([data.site_ids[i], roles[i], *[f"{v:.17g}" for v in data.covariates[i]], sigma])


def synthetic_sites(
    seed: int = 0,
    n_policy: int = 38,
    d: int = 13,
    sigma: float = DEFAULT_SIGMA,
    anchor_tau: float = DEFAULT_ANCHOR_TAU,
) -> SiteData:
    """Synthetic sites with three experimental candidates.

    Policy sites are a Gaussian cloud; ``E2`` sits near its center (the most
    representative candidate) while ``E1`` and ``E3`` sit on opposite flanks.
    ``C`` is calibrated so that ``anchor_tau`` at ``E1`` keeps every site's
    effect nonnegative.
    """
    rng = np.random.default_rng(seed)
    policy = rng.normal(size=(n_policy, d))
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    experimental = np.stack(
        [
            1.6 * direction + 0.3 * rng.normal(size=d),
            0.15 * rng.normal(size=d),
            -1.4 * direction + 0.3 * rng.normal(size=d),
        ]
    )
    X = np.vstack([experimental, policy])
    ids = ("E1", "E2", "E3") + tuple(f"P{j + 1:02d}" for j in range(n_policy))
    data = SiteData(ids, X, (0, 1, 2), tuple(range(3, 3 + n_policy)), np.full(3, sigma), 0.0)
    far = float(data.distances[data.experimental[0]].max())
    return data.with_C(calibrate_C(anchor_tau, far))


# --------------------------------------------------------------------------
# Calibration and bounds
# --------------------------------------------------------------------------


def calibrate_C(tau_hat: float, dist_max: float) -> float:
    """Largest slope keeping the effect nonnegative ``dist_max`` away from a site with effect ``tau_hat``."""
    if not dist_max > 0.0:
        raise ConfigError("dist_max must be positive")
    return tau_hat / dist_max


def calibrate_from_anchor(data: SiteData, anchor_tau: float = DEFAULT_ANCHOR_TAU, anchor: int | None = None) -> SiteData:
    """Set ``C`` from the anchor site's effect and its farthest site in the file."""
    anchor = data.experimental[0] if anchor is None else anchor
    return data.with_C(calibrate_C(anchor_tau, float(data.distances[anchor].max())))


def effect_bound(data: SiteData, anchor_tau: float = DEFAULT_ANCHOR_TAU, anchor: int | None = None) -> float:
    """``|anchor_tau| + C * max distance`` from the anchor site over the active sites."""
    anchor = data.experimental[0] if anchor is None else anchor
    idx = np.array(data.active)
    return abs(anchor_tau) + data.C * float(data.distances[anchor, idx].max())


def site_risk_bound(data: SiteData) -> float:
    """Sup of every rule's regret over Lipschitz effect functions.

    A policy term with value ``t`` and experimental value ``tau_s`` within
    ``C d`` of it is at most ``|t| Phi((C d - |t|) / sigma_s)``, so each
    rule's regret is bounded by the worst experimental/policy pair of
    ``sigma max_x x Phi(C d / sigma - x)``.
    """
    D = data.distances
    best = 0.0
    for s, sig in zip(data.experimental, data.sigma):
        d_far = float(D[s, list(data.policy)].max())
        best = max(best, mmr_risk_bound(float(sig), 0.5 * data.C * d_far))
    return best


def epsilon_for_runtime(budget_seconds: float, per_call_seconds: float, M: float, I: int) -> float:
    """Accuracy reachable when ``budget / per_call`` epochs are affordable."""
    if not (budget_seconds > 0.0 and per_call_seconds > 0.0 and M > 0.0):
        raise ConfigError("runtime budget, per-call time and M must be positive")
    if I < 2:
        raise ConfigError("a runtime budget needs at least two rules")
    return math.sqrt(2.0 * M**2 * math.log(I) / (budget_seconds / per_call_seconds))


def implied_risk_bound_sq(epochs: int, epsilon: float, I: int) -> float:
    """``M^2`` consistent with ``epochs = 2 M^2 ln I / eps^2``."""
    return epochs * epsilon**2 / (2.0 * math.log(I))


# --------------------------------------------------------------------------
# Scenarios
# --------------------------------------------------------------------------


def most_representative(data: SiteData) -> int:
    """Experimental site with the smallest mean distance to the policy sites."""
    D = data.distances[np.ix_(data.experimental, data.policy)]
    return data.experimental[int(np.argmin(D.mean(axis=1)))]


def order_policy_sites(data: SiteData, reference: int | None = None) -> tuple[int, ...]:
    """Policy sites sorted by distance to ``reference`` (stable on ties)."""
    reference = most_representative(data) if reference is None else reference
    dist = data.distances[reference]
    return tuple(sorted(data.policy, key=lambda i: (dist[i], i)))


def scenario(data: SiteData, n_policy: int, reference: int | None = None) -> SiteData:
    """Restrict to the ``n_policy`` policy sites closest to ``reference``."""
    if not 1 <= n_policy <= data.n_policy:
        raise ConfigError(f"scenario needs 1..{data.n_policy} policy sites, got {n_policy}")
    return data.with_policy(order_policy_sites(data, reference)[:n_policy])


def nearest_neighbor_counts(data: SiteData) -> np.ndarray:
    """How many policy sites have each experimental site as nearest neighbor (lowest index on ties)."""
    D = data.distances[np.ix_(data.policy, data.experimental)]
    return np.bincount(np.argmin(D, axis=1), minlength=data.n_experimental)


# --------------------------------------------------------------------------
# Regret, envelopes, feasibility
# --------------------------------------------------------------------------


def _h(t: np.ndarray, A) -> np.ndarray:
    return t * ((t >= 0.0) - A)


def site_regret(s: int, tau: np.ndarray, data: SiteData) -> float:
    """Regret of experimenting on experimental site number ``s`` (0-based
    position in ``data.experimental``) under the tau vector ``tau``."""
    tau = np.asarray(tau, dtype=float)
    nE = data.n_experimental
    A = float(ndtr(tau[s] / data.sigma[s]))
    return float(np.mean(_h(tau[nE:], A)))


def regret_vector(tau: np.ndarray, data: SiteData) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    nE = data.n_experimental
    A = ndtr(tau[:nE] / data.sigma)
    tp = tau[nE:]
    return np.mean(tp[None, :] * ((tp >= 0.0)[None, :] - A[:, None]), axis=1)


def lipschitz_violation(tau: np.ndarray, data: SiteData) -> float:
    """Largest ``|tau_a - tau_b| - C d(a, b)`` over pairs of active sites."""
    tau = np.asarray(tau, dtype=float)
    gaps = np.abs(tau[:, None] - tau[None, :]) - data.C * data.active_distances
    return float(gaps.max())


def is_feasible(tau: np.ndarray, data: SiteData, tol: float = FEASIBILITY_TOL) -> bool:
    return lipschitz_violation(tau, data) <= tol


def mcshane_bounds(tau_E: np.ndarray, data: SiteData) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest Lipschitz-consistent values at each policy site."""
    tau_E = np.asarray(tau_E, dtype=float)
    DE = data.distances[np.ix_(data.experimental, data.experimental)]
    if np.max(np.abs(tau_E[:, None] - tau_E[None, :]) - data.C * DE) > FEASIBILITY_TOL:
        raise ConfigError("experimental values violate the Lipschitz constraint")
    DPE = data.distances[np.ix_(data.policy, data.experimental)]
    upper = np.min(tau_E[None, :] + data.C * DPE, axis=1)
    lower = np.max(tau_E[None, :] - data.C * DPE, axis=1)
    return lower, upper


# --------------------------------------------------------------------------
# Nature's oracle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleSettings:
    lattice_points: int = 9
    screen_keep: int = 12
    polish_keep: int = 2
    polish_tol: float = 1e-3
    # initial compass step for starts that are already near-optimal
    seed_step: float = 0.05
    max_sweeps: int = 200
    warm_starts: int = 4


def _best_endpoint(lo: np.ndarray, hi: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Per-row maximizer of the convex PWL term over ``[lo, hi]``; ties go to ``hi``."""
    return np.where(_h(hi, A) >= _h(lo, A), hi, lo)


@dataclass
class LipschitzOracle:
    """Local-search oracle for the Lipschitz site-selection game.

    Outer search over experimental values: a feasibility-repaired lattice on
    ``[-box, box]^|E|`` plus one-dimensional cone solutions and recent winners,
    screened by a separable upper bound, then polished by compass search.
    Inner search over policy values: all-upper, all-lower and greedy
    sequential starts, each driven to a fixed point by coordinate ascent that
    keeps every pairwise constraint satisfied.

    Results are not certified (``certified=False``); ``delta`` reports 0.
    """

    data: SiteData
    box: float | None = None
    settings: OracleSettings = field(default_factory=OracleSettings)

    def __post_init__(self) -> None:
        data = self.data
        D = data.distances
        E, P = list(data.experimental), list(data.policy)
        C = data.C
        self._nE, self._nP = len(E), len(P)
        self._sigma = np.asarray(data.sigma)
        self._CD_PE = C * D[np.ix_(P, E)]
        self._CD_EE = C * D[np.ix_(E, E)]
        CD_PP = C * D[np.ix_(P, P)]
        np.fill_diagonal(CD_PP, np.inf)
        self._CD_PP = CD_PP
        if self.box is None:
            span = C * float(D[np.ix_(E, P)].max()) + 4.0 * float(self._sigma.max())
            self.box = max(effect_bound(data), span)
        self._lattice = self._build_lattice()
        self._cone_cache: dict[bytes, np.ndarray] = {}
        self._recent: list[np.ndarray] = []

    # --- experimental values -------------------------------------------

    def repair(self, tau_E: np.ndarray) -> np.ndarray:
        """Clamp each experimental value into the interval allowed by the earlier ones."""
        tau_E = np.clip(np.array(tau_E, dtype=float, ndmin=2), -self.box, self.box)
        CD = self._CD_EE
        for j in range(1, self._nE):
            lo = np.max(tau_E[:, :j] - CD[j, :j], axis=1)
            hi = np.min(tau_E[:, :j] + CD[j, :j], axis=1)
            tau_E[:, j] = np.clip(tau_E[:, j], lo, np.maximum(hi, lo))
        return tau_E

    def _build_lattice(self) -> np.ndarray:
        axis = np.linspace(-self.box, self.box, self.settings.lattice_points)
        grid = np.stack(np.meshgrid(*[axis] * self._nE, indexing="ij"), axis=-1).reshape(-1, self._nE)
        return np.unique(np.round(self.repair(grid), 12), axis=0)

    def _cone_seeds(self, p: np.ndarray) -> np.ndarray:
        """For each policy site, the best cone ``tau_s = t - C d(s, s')`` peaked there.

        With one policy site this is the exact optimum: the high branch
        ``t (1 - sum_s p_s Phi((t - C d_s)/sigma_s))`` and the low branch are
        the same 1-D function of ``t``.
        """
        key = np.round(p, 6).tobytes()
        hit = self._cone_cache.get(key)
        if hit is not None:
            return hit
        upper = self.box + float(self._CD_PE.max())
        cd, sigma = self._CD_PE, self._sigma

        def values(t: np.ndarray) -> np.ndarray:
            # t[j, m]: m trial peaks for policy site j
            z = (cd[:, :, None] - t[:, None, :]) / sigma[None, :, None]
            return t * np.einsum("jsm,s->jm", ndtr(z), p)

        grid = np.linspace(0.0, upper, 129)
        coarse = values(np.broadcast_to(grid, (self._nP, grid.size)))
        j = np.argmax(coarse, axis=1)
        step = grid[1] - grid[0]
        t, _ = golden_section_max_batch(
            lambda x: values(x[:, None])[:, 0], np.maximum(grid[j] - step, 0.0), np.minimum(grid[j] + step, upper), 1e-9)
        seeds = np.concatenate([t[:, None] - cd, -t[:, None] + cd])
        seeds = self.repair(np.array(seeds))
        if len(self._cone_cache) > 64:
            self._cone_cache.clear()
        self._cone_cache[key] = seeds
        return seeds

    # --- policy values -------------------------------------------------

    def envelopes(self, tau_E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        upper = np.min(tau_E[:, None, :] + self._CD_PE[None], axis=2)
        lower = np.max(tau_E[:, None, :] - self._CD_PE[None], axis=2)
        return lower, np.maximum(upper, lower)

    def _coordinate_ascent(self, tau_P, lower, upper, A) -> np.ndarray:
        """Move each policy value to the better end of its feasible interval until nothing moves."""
        CD = self._CD_PP
        for _ in range(self.settings.max_sweeps):
            changed = False
            for a in range(self._nP):
                lo = np.maximum(lower[:, a], (tau_P - CD[a]).max(axis=1))
                hi = np.maximum(np.minimum(upper[:, a], (tau_P + CD[a]).min(axis=1)), lo)
                h_lo, h_hi, h_now = _h(lo, A), _h(hi, A), _h(tau_P[:, a], A)
                move = np.maximum(h_lo, h_hi) > h_now + _IMPROVE_TOL
                if move.any():
                    tau_P[move, a] = np.where(h_hi >= h_lo, hi, lo)[move]
                    changed = True
            if not changed:
                break
        return tau_P

    def _greedy(self, lower, upper, A) -> np.ndarray:
        """Assign policy values one at a time, largest potential gain first."""
        K, nP = lower.shape
        CD = self._CD_PP
        gain = np.maximum(_h(upper, A[:, None]), _h(lower, A[:, None]))
        order = np.argsort(-gain, axis=1, kind="stable")
        tau_P = np.zeros((K, nP))
        lo_acc = np.full((K, nP), -np.inf)
        hi_acc = np.full((K, nP), np.inf)
        rows = np.arange(K)
        for step in range(nP):
            a = order[:, step]
            lo = np.maximum(lower[rows, a], lo_acc[rows, a])
            hi = np.maximum(np.minimum(upper[rows, a], hi_acc[rows, a]), lo)
            v = _best_endpoint(lo, hi, A)
            tau_P[rows, a] = v
            lo_acc = np.maximum(lo_acc, v[:, None] - CD[a])
            hi_acc = np.minimum(hi_acc, v[:, None] + CD[a])
        return tau_P

    def inner(self, tau_E: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Best policy values found for each row of ``tau_E``; returns ``(tau_P, value)``."""
        tau_E = np.atleast_2d(tau_E)
        K = tau_E.shape[0]
        A = ndtr(tau_E / self._sigma) @ p
        lower, upper = self.envelopes(tau_E)
        starts = np.concatenate([upper, lower, self._greedy(lower, upper, A)])
        A3, lo3, hi3 = np.tile(A, 3), np.tile(lower, (3, 1)), np.tile(upper, (3, 1))
        tau_P = self._coordinate_ascent(starts, lo3, hi3, A3)
        values = np.mean(_h(tau_P, A3[:, None]), axis=1).reshape(3, K)
        pick = np.argmax(values, axis=0)
        best = tau_P.reshape(3, K, -1)[pick, np.arange(K)]
        return best, values[pick, np.arange(K)]

    def screen_bound(self, tau_E: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Separable upper bound on the inner value (policy-policy constraints dropped)."""
        A = (ndtr(tau_E / self._sigma) @ p)[:, None]
        lower, upper = self.envelopes(tau_E)
        return np.mean(np.maximum(_h(upper, A), _h(lower, A)), axis=1)

    def _polish(
        self, starts: np.ndarray, values: np.ndarray, step: np.ndarray, p: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched compass search on the experimental values."""
        x, fx, step = starts.copy(), values.copy(), step.copy()
        dirs = np.concatenate([np.eye(self._nE), -np.eye(self._nE)])
        while np.any(step > self.settings.polish_tol):
            active = np.flatnonzero(step > self.settings.polish_tol)
            trial = (x[active, None, :] + step[active, None, None] * dirs[None]).reshape(-1, self._nE)
            trial = self.repair(trial)
            _, ft = self.inner(trial, p)
            ft = ft.reshape(len(active), len(dirs))
            j = np.argmax(ft, axis=1)
            best = ft[np.arange(len(active)), j]
            improved = best > fx[active] + _IMPROVE_TOL
            for r, i in enumerate(active):
                if improved[r]:
                    x[i] = trial.reshape(len(active), len(dirs), -1)[r, j[r]]
                    fx[i] = best[r]
                else:
                    step[i] *= 0.5
        return x, fx

    def __call__(self, p: np.ndarray) -> OracleResponse:
        p = np.asarray(p, dtype=float)
        s = self.settings
        coarse = self.box / (s.lattice_points - 1)
        pools = [self._lattice, self._cone_seeds(p)]
        steps = [np.full(len(self._lattice), coarse), np.full(2 * self._nP, s.seed_step)]
        if self._recent:
            pools.append(np.array(self._recent))
            steps.append(np.full(len(self._recent), s.seed_step))
        cands, steps = np.concatenate(pools), np.concatenate(steps)
        bound = self.screen_bound(cands, p)
        keep = np.argsort(-bound, kind="stable")[: s.screen_keep]
        cands, steps = cands[keep], steps[keep]
        _, values = self.inner(cands, p)
        top = np.argsort(-values, kind="stable")[: s.polish_keep]
        tau_E, _ = self._polish(cands[top], values[top], steps[top], p)
        tau_P, values = self.inner(tau_E, p)

        tau = np.concatenate([tau_E, tau_P], axis=1)
        winners = np.flatnonzero(values >= values.max() - _IMPROVE_TOL)
        keys = [tuple(np.round(tau[i], TAU_DECIMALS)) for i in winners]
        i = int(winners[min(range(len(winners)), key=lambda r: keys[r])])
        tau_star = tau[i]

        violation = lipschitz_violation(tau_star, self.data)
        if violation > FEASIBILITY_TOL:
            raise NumericalFailure(f"oracle produced an infeasible tau vector (violation {violation:.3g})")
        risks = regret_vector(tau_star, self.data)
        if risks.min() < -1e-9:
            raise NumericalFailure(f"negative regret {risks.min():.3g} from the site oracle")
        risks = np.maximum(risks, 0.0)

        self._recent = ([tau_star[: self._nE].copy()] + self._recent)[: s.warm_starts]
        theta_id = tuple(float(v) for v in np.round(tau_star, TAU_DECIMALS))
        return OracleResponse.from_risks(theta_id, risks, p, 0.0, certified=False)


def lipschitz_oracle(p: np.ndarray, data: SiteData, settings: OracleSettings | None = None) -> OracleResponse:
    """One-shot oracle call; build a :class:`LipschitzOracle` to reuse precomputation."""
    return LipschitzOracle(data, settings=settings or OracleSettings())(p)


def single_site_value(tau_E: np.ndarray, p: np.ndarray, data: SiteData) -> float:
    """Exact inner value with one policy site: ``max(u (1 - A), -l A, 0)``."""
    if data.n_policy != 1:
        raise ConfigError("closed form needs exactly one policy site")
    lower, upper = mcshane_bounds(tau_E, data)
    A = float(ndtr(np.asarray(tau_E) / data.sigma) @ p)
    return max(float(upper[0]) * (1.0 - A), -float(lower[0]) * A, 0.0)

