"""Config parsing and the four subcommands, driven through main()."""

from __future__ import annotations

import json
import math

import pytest

from mecusum import MetricEstimate
from mecusum.cli import config_to_dict, main, parse_config


def model_dict(mid, post_mean):
    return {
        "id": mid,
        "pre": {"family": "gaussian", "mean": 0.0, "std": 1.0},
        "post": {"family": "gaussian", "mean": post_mean, "std": 1.0},
    }


def scenario_dict(n_models=2, change_point="inf", horizon=None):
    means = {1: [1.0], 2: [0.75, 1.0], 3: [0.5, 0.75, 1.0]}[n_models]
    out = {
        "models": [model_dict(i + 1, mean) for i, mean in enumerate(means)],
        "change_point": change_point,
    }
    if horizon is not None:
        out["horizon"] = horizon
    return out


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def read_rows(path):
    """CSV rows as lists of strings, skipping the comment header."""
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return [ln.split(",") for ln in lines]


def test_config_round_trip_is_a_fixed_point():
    data = {
        "scenario": scenario_dict(2, change_point=1),
        "policy": {"variant": "me-cusum", "gamma": 100.0,
                   "scales": {"2": 1.5}, "budgets": {"1": 2.5}},
        "simulation": {"trials": 50, "seed": 9, "cycles": 1000},
        "output": {"path": "out.csv"},
    }
    first = config_to_dict(parse_config(data))
    second = config_to_dict(parse_config(first))
    assert first == second
    assert first["policy"]["A"] == math.log(100.0)
    assert first["scenario"]["change_point"] == 1


def test_config_rejects_unknown_and_inconsistent_fields():
    base = {"scenario": scenario_dict(2), "policy": {
        "variant": "me-cusum", "A": 3.0, "budgets": {"1": 2}}}
    ok = parse_config(base)
    assert ok.policy.scales == {2: 1.0}  # scale defaults fill in
    bad_cases = [
        {**base, "policyy": {}},
        {**base, "simulation": {"threads": 4}},
        {**base, "output": {"path": "x", "mode": "w"}},
    ]
    for data in bad_cases:
        with pytest.raises(ValueError):
            parse_config(data)
    with pytest.raises(ValueError):
        parse_config({"policy": base["policy"]})  # scenario is required
    for policy in (
        {"variant": "me-cusum", "budgets": {"1": 2}},                 # no threshold
        {"variant": "me-cusum", "A": 3.0, "gamma": 10.0},             # both thresholds
        {"variant": "sprt", "A": 3.0},                                # unknown variant
        {"variant": "me-cusum", "A": 3.0, "m": 3},                    # m vs models
        {"variant": "cusum", "A": 3.0},                               # cusum needs m=1
        {"variant": "me-cusum", "A": 3.0, "budgets": {"one": 2}},     # bad key type
    ):
        with pytest.raises(ValueError):
            parse_config({"scenario": scenario_dict(2), "policy": policy})
    with pytest.raises(ValueError):
        parse_config({"scenario": scenario_dict(3),
                      "policy": {"variant": "rss", "A": 3.0, "p_hi": 0.5}})


def test_trace_writes_deterministic_csv(tmp_path):
    config = {
        "scenario": scenario_dict(2, horizon=400),
        "policy": {"variant": "me-cusum", "gamma": 1e9, "budgets": {"1": 2.5}},
        "simulation": {"seed": 5},
    }
    path = write_config(tmp_path, config)
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    assert main(["trace", "--config", path, "--output", str(out_a)]) == 0
    assert main(["trace", "--config", path, "--output", str(out_b)]) == 0

    def after_comment(p):
        # the config comment embeds the output path, so skip it
        return p.read_text().split("\n", 1)[1]

    assert after_comment(out_a) == after_comment(out_b)
    text = out_a.read_text()
    assert text.startswith("# config: ")
    assert "# seed: 5\n" in text
    rows = read_rows(out_a)
    assert rows[0] == ["n", "level", "action", "observation", "statistic", "event"]
    body = rows[1:]
    assert len(body) == 400
    assert body[0][0] == "1"
    # the informative experiment is sampled exactly while the statistic is
    # at or above zero
    prev_stat = 0.0
    for n, level, action, obs, stat, event in body:
        assert action == f"sample({level})"
        assert level == ("2" if prev_stat >= 0.0 else "1")
        assert obs != ""
        prev_stat = float(stat)
    # a different seed changes the trace
    out_c = tmp_path / "c.csv"
    assert main(["trace", "--config", path, "--seed", "6",
                 "--output", str(out_c)]) == 0
    assert after_comment(out_c) != after_comment(out_a)


def test_trace_data_efficient_idle_rows(tmp_path):
    config = {
        "scenario": scenario_dict(3, horizon=3000),
        "policy": {"variant": "de-me-cusum", "gamma": 1e9,
                   "budgets": {"0": 4, "1": 3, "2": 2}, "mu": 0.1},
        "simulation": {"seed": 2},
    }
    out = tmp_path / "de.csv"
    path = write_config(tmp_path, config)
    assert main(["trace", "--config", path, "--output", str(out)]) == 0
    body = read_rows(out)[1:]
    idle = [row for row in body if row[1] == "0"]
    assert idle
    assert all(row[2] == "idle" and row[3] == "" for row in idle)
    climbs = 0
    for prev, cur in zip(body, body[1:]):
        if prev[1] == "0" and prev[5] == "" and cur[1] == "0" and cur[5] == "":
            assert float(cur[4]) - float(prev[4]) == pytest.approx(0.1, abs=1e-12)
            climbs += 1
    assert climbs > 0


def test_evaluate_arlfa_json(tmp_path):
    config = {
        "scenario": scenario_dict(1),
        "policy": {"variant": "cusum", "gamma": 20.0},
        "simulation": {"trials": 300, "seed": 3},
    }
    out = tmp_path / "arlfa.json"
    path = write_config(tmp_path, config)
    assert main(["evaluate", "arlfa", "--config", path,
                 "--output", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["metric"] == "arlfa"
    assert payload["seed"] == 3
    assert payload["config"]["policy"]["A"] == math.log(20.0)
    result = payload["result"]
    assert result["trials"] == 300
    assert result["horizon_hits"] == 0
    assert result["mean"] - 2.0 * result["std_error"] >= 20.0


def test_evaluate_wadd_includes_penalty(tmp_path):
    config = {
        "scenario": scenario_dict(2, change_point=1),
        "policy": {"variant": "me-cusum", "gamma": 20.0, "budgets": {"1": 2}},
        "simulation": {"trials": 300, "seed": 4},
    }
    out = tmp_path / "wadd.json"
    path = write_config(tmp_path, config)
    assert main(["evaluate", "wadd", "--config", path, "--output", str(out)]) == 0
    result = json.loads(out.read_text())["result"]
    assert result["penalty"] == 2.0
    assert result["mean"] == result["sim_mean"] + 2.0


def test_evaluate_strict_promotes_horizon_hits(tmp_path, monkeypatch):
    config = {
        "scenario": scenario_dict(1),
        "policy": {"variant": "cusum", "gamma": 20.0},
        "simulation": {"trials": 10, "seed": 1},
    }
    path = write_config(tmp_path, config)
    cut = MetricEstimate(5.0, 0.0, 10, (5.0, 5.0), 0.95, horizon_hits=3)
    monkeypatch.setattr("mecusum.cli.estimate_arlfa",
                        lambda *args, **kwargs: cut)
    out = tmp_path / "cut.json"
    assert main(["evaluate", "arlfa", "--config", path,
                 "--output", str(out)]) == 0
    assert main(["evaluate", "arlfa", "--strict", "--config", path,
                 "--output", str(out)]) == 2


def test_evaluate_por_csv_direct(tmp_path):
    config = {
        "scenario": scenario_dict(2),
        "policy": {"variant": "de-me-cusum", "gamma": 100.0,
                   "budgets": {"0": 3, "1": 2}, "mu": 0.1},
        "simulation": {"trials": 2, "seed": 6, "horizon": 20_000},
    }
    out = tmp_path / "por.csv"
    path = write_config(tmp_path, config)
    assert main(["evaluate", "por", "--config", path, "--output", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["experiment", "por", "por_se"]
    names = [row[0] for row in rows[1:]]
    assert names == ["idle", "1", "2"]
    total = sum(float(row[1]) for row in rows[1:])
    assert total == pytest.approx(1.0, abs=1e-9)


def test_evaluate_por_renewal_degenerate_budget(tmp_path):
    config = {
        "scenario": scenario_dict(2),
        "policy": {"variant": "me-cusum", "gamma": 100.0, "budgets": {"1": 0}},
        "simulation": {"seed": 7, "por_method": "renewal", "cycles": 500},
    }
    out = tmp_path / "por0.csv"
    path = write_config(tmp_path, config)
    assert main(["evaluate", "por", "--config", path, "--output", str(out)]) == 0
    rows = read_rows(out)
    assert rows[1] == ["1", "0.0", "0.0"]
    assert rows[2] == ["2", "1.0", "0.0"]


def test_evaluate_por_json_output(tmp_path, capsys):
    config = {
        "scenario": scenario_dict(2),
        "policy": {"variant": "me-cusum", "gamma": 100.0, "budgets": {"1": 2}},
        "simulation": {"seed": 8, "por_method": "renewal", "cycles": 2000},
    }
    path = write_config(tmp_path, config)
    assert main(["evaluate", "por", "--config", path]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["metric"] == "por"
    assert payload["method"] == "renewal"
    assert set(payload["result"]) == {"1", "2"}


def test_calibrate_json_and_csv(tmp_path):
    config = {
        "scenario": scenario_dict(2),
        "calibration": {"gamma": 1000.0, "betas": {"2": 0.5},
                        "search_cycles": 20_000, "final_cycles": 40_000,
                        "max_evaluations": 200},
        "simulation": {"seed": 9},
    }
    path = write_config(tmp_path, config)
    out_json = tmp_path / "calib.json"
    assert main(["calibrate", "--config", path, "--output", str(out_json)]) == 0
    calib = json.loads(out_json.read_text())["calibration"]
    assert calib["converged"] is True
    assert calib["params"]["variant"] == "me-cusum"
    assert 1.0 <= calib["params"]["budgets"]["1"] <= 3.0
    assert abs(calib["achieved"]["2"]["mean"] - 0.5) <= 0.02
    assert abs(calib["residuals"]["2"]) <= 0.02

    out_csv = tmp_path / "calib.csv"
    assert main(["calibrate", "--config", path, "--output", str(out_csv)]) == 0
    rows = read_rows(out_csv)
    assert rows[0] == ["target_beta_1", "target_beta_2", "a_2", "N_1",
                       "achieved_por_1", "achieved_por_2"]
    values = dict(zip(rows[0], rows[1]))
    assert float(values["a_2"]) == 1.0
    assert abs(float(values["achieved_por_2"]) - 0.5) <= 0.02


def test_calibrate_non_convergence_exit_code(tmp_path, capsys):
    config = {
        "scenario": scenario_dict(3),
        "calibration": {"gamma": 1000.0,
                        "betas": {"1": 0.2, "2": 0.4, "3": 0.4},
                        "search_cycles": 2000, "final_cycles": 2000,
                        "max_evaluations": 2},
        "simulation": {"seed": 10},
    }
    out = tmp_path / "calib.json"
    path = write_config(tmp_path, config)
    assert main(["calibrate", "--config", path, "--output", str(out)]) == 2
    assert "did not converge" in capsys.readouterr().err
    assert json.loads(out.read_text())["calibration"]["converged"] is False


def test_tradeoff_writes_one_file_per_policy(tmp_path):
    config = {
        "scenario": scenario_dict(2, change_point=1),
        "simulation": {"trials": 150, "seed": 11},
        "tradeoff": {
            "gammas": [5.0, 20.0],
            "policies": [
                {"label": "single", "variant": "cusum", "model_ids": [2]},
                {"label": "pair", "variant": "me-cusum", "budgets": {"1": 2}},
            ],
        },
    }
    path = write_config(tmp_path, config)
    base = tmp_path / "curve.csv"
    assert main(["tradeoff", "--config", path, "--output", str(base)]) == 0
    for label in ("single", "pair"):
        rows = read_rows(tmp_path / f"curve-{label}.csv")
        assert rows[0] == ["gamma", "log_arlfa", "wadd", "wadd_se"]
        assert [row[0] for row in rows[1:]] == ["5.0", "20.0"]
        assert float(rows[1][1]) < float(rows[2][1])


def test_tradeoff_falls_back_to_main_policy(tmp_path):
    config = {
        "scenario": scenario_dict(1, change_point=1),
        "policy": {"variant": "cusum", "gamma": 10.0},
        "simulation": {"trials": 100, "seed": 12},
        "tradeoff": {"gammas": [5.0, 20.0]},
    }
    out = tmp_path / "solo.csv"
    path = write_config(tmp_path, config)
    assert main(["tradeoff", "--config", path, "--output", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 3


def test_tradeoff_unknown_model_ids(tmp_path, capsys):
    config = {
        "scenario": scenario_dict(2, change_point=1),
        "simulation": {"trials": 10, "seed": 1},
        "tradeoff": {"gammas": [5.0],
                     "policies": [{"variant": "cusum", "model_ids": [7]}]},
    }
    path = write_config(tmp_path, config)
    assert main(["tradeoff", "--config", path]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_configs_exit_one(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["trace", "--config", missing]) == 1
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["trace", "--config", str(broken)]) == 1
    no_policy = write_config(tmp_path, {"scenario": scenario_dict(2)}, "np.json")
    assert main(["trace", "--config", no_policy]) == 1
    capsys.readouterr()


def test_gamma_override_rethresholds_policy(tmp_path):
    config = {
        "scenario": scenario_dict(1, horizon=50),
        "policy": {"variant": "cusum", "A": 3.0},
        "simulation": {"seed": 13},
    }
    out = tmp_path / "g.csv"
    path = write_config(tmp_path, config)
    assert main(["trace", "--config", path, "--gamma", "50",
                 "--output", str(out)]) == 0
    comment = out.read_text().splitlines()[0]
    embedded = json.loads(comment[len("# config: "):])
    assert embedded["policy"]["A"] == math.log(50.0)
