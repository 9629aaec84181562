"""Compute epsilon-minimax randomized decision rules from the command line.

Subcommands::

    solve       run the solver on one problem and write result.json, trace.csv and plot tables
    compare     solve a treatment-choice problem and tabulate the exact rule against the mixture
    game        solve a matrix game with both the solver and the exact LP
    sites-prep  order policy sites by distance to a reference site (or write synthetic sites)

Settings come from ``--config file.toml`` and flags; flags win.  Exit codes:
0 success, 2 configuration error, 3 oracle contract violation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtr

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import export
from .finite_game import MatrixGame, lp_minimax
from .hedge import (
    ConfigError,
    NumericalFailure,
    OracleContractError,
    SolverConfig,
    SolverResult,
    compute_schedule,
    hedge_solve,
    hedge_solve_stochastic,
)
from .sites import (
    DEFAULT_ANCHOR_TAU,
    DEFAULT_SIGMA,
    LipschitzOracle,
    SiteData,
    calibrate_from_anchor,
    effect_bound,
    epsilon_for_runtime,
    load_sites,
    most_representative,
    nearest_neighbor_counts,
    order_policy_sites,
    scenario,
    site_risk_bound,
    synthetic_sites,
    write_sites,
)
from .treatment import (
    MMROracle,
    MMRProblem,
    RobustBayesProblem,
    induced_action,
    mqs_rule,
    ramp_treatment_probability,
    rb_gradient_sampler,
    rb_oracle,
    rb_rho_star,
    rho_star,
)

log = logging.getLogger("epsminimax")

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_NUMERICAL = 0, 2, 3, 4
PROBLEMS = ("mmr", "robust_bayes", "sites", "game")

DEFAULTS: dict[str, Any] = {
    "problem": "mmr",
    "sigma": None,
    "k": 2.0,
    "mu_bar": 0.5,
    "n_thresholds": 500,
    "threshold_min": None,
    "threshold_max": None,
    "sites": None,
    "synthetic": False,
    "scenario": None,
    "reference": None,
    "C": None,
    "anchor_tau": DEFAULT_ANCHOR_TAU,
    "site_bound": "lipschitz",
    "matrix": None,
    "M": None,
    "epsilon": None,
    "runtime_budget": None,
    "per_call": None,
    "risk_bound": None,
    "early_stop": True,
    "gap_check_period": 50,
    "max_epochs": None,
    "stochastic": False,
    "seed": 0,
    "output_dir": "out",
    "grid_points": 801,
}


# --------------------------------------------------------------------------
# Argument parsing and config merge
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", type=Path, help="TOML file with any of the settings below")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--runtime-budget", type=float, help="seconds; with --per-call sets epsilon")
    g.add_argument("--per-call", type=float, help="seconds per oracle call")
    g.add_argument("--risk-bound", type=float, help="override the problem's risk bound M")
    g.add_argument("--early-stop", dest="early_stop", action="store_true", default=None)
    g.add_argument("--no-early-stop", dest="early_stop", action="store_false")
    g.add_argument("--gap-check-period", type=int)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--output-dir", type=Path)
    g.add_argument("-v", "--verbose", action="store_true")


def _problem_args(p: argparse.ArgumentParser, problems: Sequence[str]) -> None:
    p.add_argument("--problem", choices=problems)
    t = p.add_argument_group("treatment choice")
    t.add_argument("--sigma", type=float)
    t.add_argument("--k", type=float)
    t.add_argument("--mu-bar", type=float)
    t.add_argument("--n-thresholds", type=int)
    t.add_argument("--threshold-min", type=float)
    t.add_argument("--threshold-max", type=float)
    t.add_argument("--stochastic", action="store_true", default=None,
                   help="robust_bayes: sample nature's prior instead of averaging it")
    t.add_argument("--grid-points", type=int, help="mu_hat grid size for rule curves")
    if "sites" in problems:
        s = p.add_argument_group("site selection")
        _site_args(s)
        s.add_argument("--scenario", type=int, help="number of policy sites closest to the reference")
        s.add_argument("--site-bound", choices=("lipschitz", "effect"))
    if "game" in problems:
        m = p.add_argument_group("matrix game")
        m.add_argument("--matrix", type=Path)
        m.add_argument("--M", type=float, dest="M")


def _site_args(s) -> None:
    s.add_argument("--sites", type=Path, help="site CSV: site_id, role, x1..xd[, sigma]")
    s.add_argument("--synthetic", action="store_true", default=None)
    s.add_argument("--C", type=float, dest="C", help="Lipschitz constant (default: calibrate)")
    s.add_argument("--anchor-tau", type=float)
    s.add_argument("--reference", help="site id used to order policy sites")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epsminimax", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one problem")
    _problem_args(solve, PROBLEMS)
    _common(solve)

    compare = sub.add_parser("compare", help="exact rule vs. epsilon-minimax mixture")
    _problem_args(compare, ("mmr", "robust_bayes"))
    _common(compare)

    game = sub.add_parser("game", help="matrix game: solver vs. exact LP")
    game.add_argument("--matrix", type=Path)
    game.add_argument("--M", type=float, dest="M")
    _common(game)

    prep = sub.add_parser("sites-prep", help="order policy sites for scenarios")
    _site_args(prep)
    prep.add_argument("--config", type=Path)
    prep.add_argument("--seed", type=int)
    prep.add_argument("--sigma", type=float)
    prep.add_argument("--output-dir", type=Path)
    prep.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = {key.replace("-", "_"): value for key, value in raw.items()}
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def merge_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the TOML file, then explicit flags."""
    settings = dict(DEFAULTS)
    settings.update(load_config(getattr(args, "config", None)))
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    if args.command == "game":
        settings["problem"] = "game"
    return settings


# --------------------------------------------------------------------------
# Problem construction
# --------------------------------------------------------------------------


class Problem:
    """Everything a run needs: oracle(s), risk bound, menu size and metadata."""

    def __init__(self, name: str, oracle, I: int, M: float, meta: dict[str, Any],
                 sampler=None, labels: Sequence[str] | None = None) -> None:
        self.name, self.oracle, self.I, self.M = name, oracle, I, M
        self.meta, self.sampler = meta, sampler
        self.labels = list(labels) if labels is not None else [str(i + 1) for i in range(I)]
        self.model: Any = None


def _interval(s: dict[str, Any]) -> tuple[float, float] | None:
    lo, hi = s["threshold_min"], s["threshold_max"]
    if lo is None and hi is None:
        return None
    return (-s["k"] if lo is None else lo, s["k"] if hi is None else hi)


def load_site_data(s: dict[str, Any]) -> SiteData:
    sigma = DEFAULT_SIGMA if s.get("sigma") is None else float(s["sigma"])
    if s.get("sites"):
        data = load_sites(s["sites"], sigma=sigma)
    elif s.get("synthetic"):
        data = synthetic_sites(seed=int(s.get("seed") or 0), sigma=sigma)
    else:
        raise ConfigError("site problems need --sites FILE or --synthetic")
    if s.get("C") is not None:
        return data.with_C(float(s["C"]))
    return calibrate_from_anchor(data, float(s.get("anchor_tau", DEFAULT_ANCHOR_TAU)))


def _reference(data: SiteData, site_id: str | None) -> int | None:
    if site_id is None:
        return None
    if site_id not in data.site_ids:
        raise ConfigError(f"unknown reference site {site_id!r}")
    return data.site_ids.index(site_id)


def build_problem(s: dict[str, Any]) -> Problem:
    name = s["problem"]
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}")
    sigma = 1.0 if s["sigma"] is None else float(s["sigma"])
    if name == "mmr":
        prob = MMRProblem.with_grid(sigma, float(s["k"]), int(s["n_thresholds"]), _interval(s))
        pb = Problem(name, MMROracle(prob), prob.I, prob.risk_bound(),
                     {"sigma": prob.sigma, "k": prob.k, "thresholds": list(prob.thresholds)})
        pb.model = prob
        return pb
    if name == "robust_bayes":
        prob = RobustBayesProblem.with_grid(sigma, float(s["k"]), float(s["mu_bar"]),
                                            int(s["n_thresholds"]), _interval(s))
        pb = Problem(name, lambda p: rb_oracle(p, prob), prob.I, prob.risk_bound(),
                     {"sigma": prob.sigma, "k": prob.k, "mu_bar": prob.mu_bar,
                      "thresholds": list(prob.thresholds)},
                     sampler=lambda p, rng: rb_gradient_sampler(p, prob, rng))
        pb.model = prob
        return pb
    if name == "sites":
        data = load_site_data(s)
        if s["scenario"] is not None:
            data = scenario(data, int(s["scenario"]), _reference(data, s["reference"]))
        M = effect_bound(data, float(s["anchor_tau"])) if s["site_bound"] == "effect" else site_risk_bound(data)
        pb = Problem(name, LipschitzOracle(data), data.n_experimental, M,
                     {"C": data.C, "sigma": data.sigma, "experimental": data.experimental_names(),
                      "policy": data.policy_names()},
                     labels=data.experimental_names())
        pb.model = data
        return pb
    if s["matrix"] is None:
        raise ConfigError("the game problem needs --matrix FILE")
    game = MatrixGame.from_csv(s["matrix"], s["M"])
    pb = Problem(name, game.oracle(), game.I, game.M, {"matrix": str(s["matrix"]), "M": game.M})
    pb.model = game
    return pb


def solver_config(s: dict[str, Any], problem: Problem) -> SolverConfig:
    M = problem.M if s["risk_bound"] is None else float(s["risk_bound"])
    has_eps = s["epsilon"] is not None
    has_budget = s["runtime_budget"] is not None or s["per_call"] is not None
    if has_eps == has_budget:
        raise ConfigError("give exactly one of epsilon or runtime_budget + per_call")
    if has_budget:
        if s["runtime_budget"] is None or s["per_call"] is None:
            raise ConfigError("runtime budget mode needs both runtime_budget and per_call")
        eps = epsilon_for_runtime(float(s["runtime_budget"]), float(s["per_call"]), M, problem.I)
        log.info("runtime budget %.6g s at %.6g s/call -> epsilon = %.6g", s["runtime_budget"], s["per_call"], eps)
    else:
        eps = float(s["epsilon"])
    early_stop = bool(s["early_stop"])
    if s["stochastic"]:
        if problem.sampler is None:
            raise ConfigError(f"--stochastic is not available for problem {problem.name!r}")
        early_stop = False
    return SolverConfig(
        epsilon=eps,
        M=M,
        I=problem.I,
        max_epochs_override=s["max_epochs"],
        early_stop=early_stop,
        gap_check_period=int(s["gap_check_period"]),
        seed=int(s["seed"]),
    )


def run_solver(problem: Problem, config: SolverConfig, stochastic: bool = False) -> SolverResult:
    if stochastic:
        return hedge_solve_stochastic(problem.sampler, config, evaluator=problem.oracle)
    return hedge_solve(problem.oracle, config)


# --------------------------------------------------------------------------
# Outputs
# --------------------------------------------------------------------------


def _out_dir(s: dict[str, Any]) -> Path:
    out = Path(s["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def rule_curve_rows(problem: Problem, result: SolverResult, n: int):
    """``mu_hat``, mixture treatment probability, exact ramp rule, and their
    expected treatment probabilities at ``mu = mu_hat``."""
    model = problem.model
    if problem.name == "mmr":
        rho = rho_star(model.sigma, model.k)
    else:
        _, rho = rb_rho_star(model)
    span = max(max(abs(c) for c in model.thresholds), rho) + 1.0
    grid = np.linspace(-span, span, n)
    mixture = induced_action(result.p_epsilon.weights, model.thresholds, grid)
    exact = mqs_rule(grid, rho)
    mixture_expected = np.array([
        float(result.p_epsilon.weights @ ndtr((m - model.c) / model.sigma)) for m in grid
    ])
    exact_expected = ramp_treatment_probability(grid, rho, model.sigma)
    return rho, zip(grid, mixture, exact, mixture_expected, exact_expected)


def write_outputs(out: Path, problem: Problem, result: SolverResult, s: dict[str, Any], wall: float) -> dict[str, Any]:
    extra: dict[str, Any] = {"problem": {"name": problem.name, **problem.meta},
                             "wall_seconds": wall, "stochastic": bool(s["stochastic"])}
    p = result.p_epsilon.weights
    if problem.name in ("mmr", "robust_bayes"):
        export.write_table(out / "weights.csv", ["threshold", "probability"], zip(problem.model.thresholds, p))
        rho, rows = rule_curve_rows(problem, result, int(s["grid_points"]))
        export.write_table(out / "rule_curve.csv",
                           ["mu_hat", "mixture_action", "exact_action", "mixture_expected", "exact_expected"], rows)
        extra["exact_rule"] = {"ramp_half_width": rho}
    elif problem.name == "sites":
        counts = nearest_neighbor_counts(problem.model)
        export.write_table(out / "selection.csv", ["site_id", "probability", "nearest_neighbor_count"],
                           zip(problem.labels, p, counts))
    elif problem.name == "game":
        lp = lp_minimax(problem.model)
        export.write_table(out / "game.csv", ["row", "p_solver", "p_lp"], zip(range(1, problem.I + 1), p, lp.p))
        extra["lp_value"] = lp.value
    export.write_result(out / "result.json", result, extra)
    export.write_trace(out / "trace.csv", result)
    return extra


def summary_line(problem: Problem, result: SolverResult, wall: float) -> str:
    upper = "n/a" if math.isnan(result.upper_bound) else f"{result.upper_bound:.6f}"
    tags = []
    if not result.certified:
        tags.append("uncertified oracle")
    if result.in_expectation:
        tags.append("in expectation")
    if result.stopped_early:
        tags.append("early stop")
    tag = f" ({', '.join(tags)})" if tags else ""
    return (
        f"{problem.name}: bracket [{result.lower_bound:.6f}, {upper}] v_bar={result.v_bar_epsilon:.6f} "
        f"epochs={result.epochs_run}/T={result.scheduled_epochs} eps={result.config.epsilon:.4g} "
        f"M={result.config.M:.6g} wall={wall:.2f}s{tag}"
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_solve(s: dict[str, Any]) -> int:
    problem = build_problem(s)
    config = solver_config(s, problem)
    eta, T = compute_schedule(config.epsilon, config.M, config.I)
    log.info("%s: I=%d M=%.6g eps=%.6g eta=%.6g T=%d", problem.name, config.I, config.M, config.epsilon, eta, T)
    start = time.perf_counter()
    result = run_solver(problem, config, bool(s["stochastic"]))
    wall = time.perf_counter() - start
    out = _out_dir(s)
    write_outputs(out, problem, result, s, wall)
    print(summary_line(problem, result, wall))
    return EXIT_OK


def cmd_compare(s: dict[str, Any]) -> int:
    if s["problem"] not in ("mmr", "robust_bayes"):
        raise ConfigError("compare supports the mmr and robust_bayes problems")
    problem = build_problem(s)
    config = solver_config(s, problem)
    start = time.perf_counter()
    result = run_solver(problem, config, bool(s["stochastic"]))
    wall = time.perf_counter() - start
    out = _out_dir(s)
    extra = write_outputs(out, problem, result, s, wall)
    print(summary_line(problem, result, wall))
    print(f"exact rule: ramp on [-{extra['exact_rule']['ramp_half_width']:.6f}, "
          f"{extra['exact_rule']['ramp_half_width']:.6f}]; curves in {out / 'rule_curve.csv'}")
    return EXIT_OK


def cmd_game(s: dict[str, Any]) -> int:
    problem = build_problem(s)
    config = solver_config(s, problem)
    start = time.perf_counter()
    result = run_solver(problem, config)
    wall = time.perf_counter() - start
    out = _out_dir(s)
    extra = write_outputs(out, problem, result, s, wall)
    print(summary_line(problem, result, wall))
    diff = result.upper_bound - extra["lp_value"]
    print(f"lp value={extra['lp_value']:.6f} solver upper={result.upper_bound:.6f} difference={diff:.6f}")
    return EXIT_OK


def cmd_sites_prep(s: dict[str, Any]) -> int:
    data = load_site_data(s)
    out = _out_dir(s)
    if s.get("synthetic") and not s.get("sites"):
        write_sites(data, out / "synthetic_sites.csv")
    ref = _reference(data, s.get("reference"))
    ref = most_representative(data) if ref is None else ref
    order = order_policy_sites(data, ref)
    D = data.distances
    E = data.experimental
    rows = []
    for rank, i in enumerate(order, start=1):
        nn = E[int(np.argmin(D[i, list(E)]))]
        rows.append([rank, data.site_ids[i], float(D[ref, i]), data.site_ids[nn],
                     *[float(D[i, e]) for e in E]])
    header = ["rank", "site_id", "distance_to_reference", "nearest_experimental",
              *[f"distance_{data.site_ids[e]}" for e in E]]
    export.write_table(out / "policy_order.csv", header, rows)
    print(f"reference {data.site_ids[ref]}; C={data.C:.6g}; {len(order)} policy sites ordered "
          f"in {out / 'policy_order.csv'}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[dict[str, Any]], int]] = {
    "solve": cmd_solve,
    "compare": cmd_compare,
    "game": cmd_game,
    "sites-prep": cmd_sites_prep,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = merge_settings(args)
        return COMMANDS[args.command](settings)
    except OracleContractError as exc:
        print(f"error: oracle contract violated: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
