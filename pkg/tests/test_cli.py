import csv
import json
import math

import numpy as np
import pytest

from epsminimax import cli, export
from epsminimax.hedge import NumericalFailure, compute_schedule
from epsminimax.sites import epsilon_for_runtime


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["schema_version"] == str(export.SCHEMA_VERSION) for r in rows)
    return rows


@pytest.fixture
def pennies(tmp_path):
    path = tmp_path / "pennies.csv"
    path.write_text("1,0\n0,1\n")
    return path


def test_game_command(tmp_path, pennies, capsys):
    out = tmp_path / "out"
    code = cli.main(["game", "--matrix", str(pennies), "--epsilon", "0.05", "--output-dir", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "lp value=0.500000" in text
    doc = json.loads((out / "result.json").read_text())
    assert doc["schema_version"] == export.SCHEMA_VERSION
    assert doc["result"]["upper_bound"] - doc["lp_value"] <= 0.05
    rows = read_table(out / "game.csv")
    assert [float(r["p_lp"]) for r in rows] == pytest.approx([0.5, 0.5])


def test_result_json_round_trip(tmp_path, pennies):
    out = tmp_path / "out"
    cli.main(["game", "--matrix", str(pennies), "--epsilon", "0.1", "--no-early-stop", "--output-dir", str(out)])
    back = export.read_result(out / "result.json")
    settings = cli.merge_settings(cli.build_parser().parse_args(
        ["game", "--matrix", str(pennies), "--epsilon", "0.1", "--no-early-stop"]))
    problem = cli.build_problem(settings)
    fresh = cli.run_solver(problem, cli.solver_config(settings, problem))
    assert export.results_equal(back, fresh)


def test_trace_csv_columns(tmp_path, pennies):
    out = tmp_path / "out"
    cli.main(["game", "--matrix", str(pennies), "--epsilon", "0.2", "--no-early-stop", "--output-dir", str(out)])
    rows = read_table(out / "trace.csv")
    _, T = compute_schedule(0.2, 1.0, 2)
    assert len(rows) == T
    assert {"epoch", "achieved_value", "delta", "theta_id", "lower_bound", "upper_bound", "p_1", "p_2"} <= set(rows[0])
    assert [int(r["epoch"]) for r in rows] == list(range(1, T + 1))

    # gap checks appear in the trace when early stopping is on
    out = tmp_path / "stop"
    cli.main(["game", "--matrix", str(pennies), "--epsilon", "0.2", "--gap-check-period", "10",
              "--output-dir", str(out)])
    rows = read_table(out / "trace.csv")
    checked = [r for r in rows if r["lower_bound"] != ""]
    assert checked and all(int(r["epoch"]) % 10 == 0 for r in checked)
    assert float(checked[-1]["upper_bound"]) - float(checked[-1]["lower_bound"]) <= 0.2


def test_mmr_solve_small(tmp_path, capsys):
    out = tmp_path / "mmr"
    code = cli.main(["solve", "--problem", "mmr", "--sigma", "1", "--k", "2", "--n-thresholds", "21",
                     "--epsilon", "0.3", "--output-dir", str(out)])
    assert code == 0
    assert capsys.readouterr().out.startswith("mmr: bracket [")
    weights = read_table(out / "weights.csv")
    assert len(weights) == 21
    assert sum(float(r["probability"]) for r in weights) == pytest.approx(1.0)
    curve = read_table(out / "rule_curve.csv")
    mixture = np.array([float(r["mixture_action"]) for r in curve])
    assert np.all(np.diff(mixture) >= -1e-12)
    doc = json.loads((out / "result.json").read_text())
    assert doc["exact_rule"]["ramp_half_width"] == pytest.approx(1.8797, abs=1e-3)


def test_compare_robust_bayes(tmp_path, capsys):
    out = tmp_path / "rb"
    code = cli.main(["compare", "--problem", "robust_bayes", "--n-thresholds", "41",
                     "--epsilon", "0.3", "--output-dir", str(out)])
    assert code == 0
    assert "exact rule: ramp on [-1.8486" in capsys.readouterr().out
    curve = read_table(out / "rule_curve.csv")
    exact = np.array([float(r["exact_action"]) for r in curve])
    assert np.all(np.diff(exact) >= 0) and exact[0] == 0.0 and exact[-1] == 1.0


def test_stochastic_solve(tmp_path, capsys):
    out = tmp_path / "st"
    code = cli.main(["solve", "--problem", "robust_bayes", "--n-thresholds", "21", "--epsilon", "0.4",
                     "--stochastic", "--seed", "7", "--output-dir", str(out)])
    assert code == 0
    assert "in expectation" in capsys.readouterr().out
    back = export.read_result(out / "result.json")
    assert back.in_expectation and back.config.seed == 7 and not back.stopped_early


def test_budget_mode_derives_epsilon():
    M = math.sqrt(4.5739)
    args = cli.build_parser().parse_args(
        ["solve", "--problem", "sites", "--synthetic", "--scenario", "1",
         "--runtime-budget", "1800", "--per-call", "0.35", "--risk-bound", repr(M)])
    s = cli.merge_settings(args)
    config = cli.solver_config(s, cli.build_problem(s))
    assert round(config.epsilon, 3) == 0.044
    assert config.epsilon == epsilon_for_runtime(1800, 0.35, M, 3)


def test_sites_solve_writes_selection(tmp_path):
    out = tmp_path / "s"
    code = cli.main(["solve", "--problem", "sites", "--synthetic", "--scenario", "1",
                     "--runtime-budget", "60", "--per-call", "0.35", "--max-epochs", "3",
                     "--output-dir", str(out)])
    assert code == 0
    rows = read_table(out / "selection.csv")
    assert [r["site_id"] for r in rows] == ["E1", "E2", "E3"]
    assert sum(int(r["nearest_neighbor_count"]) for r in rows) == 1


def test_budget_and_epsilon_modes_agree(tmp_path):
    eps = epsilon_for_runtime(5.0, 0.01, 0.9, 2)  # M defaults to the largest entry
    parse = cli.build_parser().parse_args
    game = tmp_path / "g.csv"
    game.write_text("0.9,0.2\n0.1,0.6\n")
    a = cli.merge_settings(parse(["game", "--matrix", str(game), "--runtime-budget", "5", "--per-call", "0.01"]))
    b = cli.merge_settings(parse(["game", "--matrix", str(game), "--epsilon", repr(eps)]))
    pa, pb = cli.build_problem(a), cli.build_problem(b)
    ra = cli.run_solver(pa, cli.solver_config(a, pa))
    rb = cli.run_solver(pb, cli.solver_config(b, pb))
    assert export.results_equal(ra, rb)


def test_toml_config_and_flag_override(tmp_path, pennies):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'matrix = "{pennies}"\nepsilon = 0.2\nseed = 5\nearly-stop = false\n')
    parse = cli.build_parser().parse_args
    s = cli.merge_settings(parse(["game", "--config", str(cfg)]))
    assert s["epsilon"] == 0.2 and s["seed"] == 5 and s["early_stop"] is False
    s = cli.merge_settings(parse(["game", "--config", str(cfg), "--epsilon", "0.1", "--early-stop"]))
    assert s["epsilon"] == 0.1 and s["early_stop"] is True


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--problem", "mmr"],  # no epsilon
        ["solve", "--problem", "mmr", "--epsilon", "0.1", "--runtime-budget", "10", "--per-call", "1"],
        ["solve", "--problem", "mmr", "--runtime-budget", "10"],
        ["solve", "--problem", "mmr", "--epsilon", "-1"],
        ["solve", "--problem", "sites", "--epsilon", "0.1"],  # no site data
        ["solve", "--problem", "mmr", "--stochastic", "--epsilon", "0.1"],
        ["game", "--matrix", "/nonexistent.csv", "--epsilon", "0.1"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main([*argv, "--output-dir", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("epsilom = 0.1\n")
    assert cli.main(["solve", "--config", str(cfg)]) == 2
    cfg.write_text("epsilon = \n")
    assert cli.main(["solve", "--config", str(cfg)]) == 2


def test_risk_bound_too_small_exits_3(tmp_path):
    code = cli.main(["solve", "--problem", "mmr", "--n-thresholds", "11", "--epsilon", "0.1",
                     "--risk-bound", "0.5", "--output-dir", str(tmp_path / "o")])
    assert code == 3


def test_numerical_failure_exits_4(tmp_path, pennies, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalFailure("injected")

    monkeypatch.setattr(cli, "hedge_solve", boom)
    code = cli.main(["game", "--matrix", str(pennies), "--epsilon", "0.1", "--output-dir", str(tmp_path / "o")])
    assert code == 4


def test_sites_prep(tmp_path, capsys):
    out = tmp_path / "prep"
    assert cli.main(["sites-prep", "--synthetic", "--output-dir", str(out)]) == 0
    assert (out / "synthetic_sites.csv").exists()
    rows = read_table(out / "policy_order.csv")
    assert len(rows) == 38
    d = [float(r["distance_to_reference"]) for r in rows]
    assert d == sorted(d)
    assert "reference E2" in capsys.readouterr().out


def test_sites_from_csv(tmp_path):
    prep = tmp_path / "prep"
    cli.main(["sites-prep", "--synthetic", "--output-dir", str(prep)])
    out = tmp_path / "run"
    code = cli.main(["solve", "--problem", "sites", "--sites", str(prep / "synthetic_sites.csv"),
                     "--scenario", "2", "--epsilon", "0.5", "--output-dir", str(out)])
    assert code == 0
    rows = read_table(out / "selection.csv")
    assert sum(float(r["probability"]) for r in rows) == pytest.approx(1.0)
