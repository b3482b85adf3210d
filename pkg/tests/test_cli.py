import csv
import json

import numpy as np
import pytest

from bellman_abc.cli import complete_dataset, fmt, loglog_slope, main, parse_int_list, read_dataset
from bellman_abc.config import ConfigError
from bellman_abc.mdp import make_env, two_state_example
from bellman_abc.smc import valid_stage_sequence


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def d2(tmp_path):
    p = tmp_path / "d2.csv"
    p.write_text("s,a,r,s_next\n0,0,-1,0\n0,1,-1,1\n", encoding="utf-8")
    return p


def test_fmt_round_trips():
    for x in [0.1, 1 / 3, -2.5e-300, 1e17 + 1.0]:
        assert float(fmt(x)) == x
    assert fmt(3) == "3" and fmt(True) == "true"


def test_read_dataset_errors_name_the_line(tmp_path):
    mdp = two_state_example()
    bad = tmp_path / "bad.csv"
    bad.write_text("s,a,r,s_next\n0,0,-1,0\n0,5,-1,1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=":3:"):
        read_dataset(bad, mdp)
    bad.write_text("s,a,r\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=":1:"):
        read_dataset(bad, mdp)
    bad.write_text("s,a,r,s_next\n0,0,-1,1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unreachable"):
        read_dataset(bad, mdp)
    bad.write_text("s,a,r,s_next\n", encoding="utf-8")
    assert read_dataset(bad, mdp) == []


def test_complete_dataset_covers_non_goal_pairs():
    mdp = make_env("five_state:1,0,0,2")
    data = complete_dataset(mdp)
    assert sorted((t.s, t.a) for t in data) == [(0, 0), (0, 1), (1, 0), (2, 1)]
    assert [t.r for t in sorted(data)] == [1.0, 0.0, 0.0, 2.0]


def test_int_lists_and_slope():
    assert parse_int_list("2..4,7") == [2, 3, 4, 7]
    with pytest.raises(ConfigError):
        parse_int_list("a,b")
    assert loglog_slope([2, 2, 4, 4], [4, 4, 16, None]) == pytest.approx(2.0)
    assert np.isnan(loglog_slope([3], [5]))


def test_offline_bad_dataset_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("s,a,r,s_next\n0,0,oops,0\n", encoding="utf-8")
    assert main(["offline", "--env", "two_state", "--dataset", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.csv:2:" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_particles": 1}), encoding="utf-8")
    assert main(["online", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"unknown": 1}), encoding="utf-8")
    assert main(["online", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["online", "--env", "nowhere", "--out", str(tmp_path)]) == 2
    assert main(["oracle", "--env", "two_state", "--closed-form"]) == 2


def test_offline_prior_only_moments(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("s,a,r,s_next\n", encoding="utf-8")
    args = ["offline", "--env", "two_state", "--dataset", str(empty), "--samples", "4000", "--warmup", "300", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = read_rows(tmp_path / "samples.csv")
    th = np.array([[float(r["theta_1"]), float(r["theta_2"])] for r in rows])
    assert list(rows[0]) == ["sample_index", "theta_1", "theta_2"]
    # prior N(0, 4^2 I); HMC draws are autocorrelated, so the bounds are loose
    assert np.all(np.abs(th.mean(axis=0)) < 0.8)
    assert np.all(np.abs(th.std(axis=0) - 4.0) < 0.8)


def test_offline_contracts_and_is_deterministic(tmp_path, d2):
    args = ["offline", "--env", "two_state", "--dataset", str(d2), "--eps-target", "0.05", "--samples", "2000", "--warmup", "500"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "samples.csv").read_bytes()
    assert a == (tmp_path / "b" / "samples.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "samples.csv")
    mean = np.mean([[float(r["theta_1"]), float(r["theta_2"])] for r in rows], axis=0)
    np.testing.assert_allclose(mean, [-2, -1], atol=0.1)


def test_online_outputs(tmp_path):
    args = ["online", "--env", "deep_sea:3", "--episodes", "6", "--particles", "10", "--mode", "non_adaptive", "--snapshot-stride", "3", "--out", str(tmp_path)]
    assert main(args) == 0
    eps = read_rows(tmp_path / "episodes.csv")
    assert list(eps[0]) == ["episode", "steps", "return", "regret", "cumulative_regret"]
    cum = np.cumsum([float(r["regret"]) for r in eps])
    np.testing.assert_allclose([float(r["cumulative_regret"]) for r in eps], cum, rtol=1e-12, atol=1e-15)
    trace = read_rows(tmp_path / "trace.csv")
    assert list(trace[0]) == ["update_index", "stage", "eps_old", "eps_new", "ess", "resampled", "gr_pass_fraction", "bellman_error", "accept_rate"]
    assert not any(r["stage"].startswith("IV") for r in trace)
    by_update = {}
    for r in trace:
        by_update.setdefault(r["update_index"], []).append(r["stage"])
    assert all(valid_stage_sequence(s) for s in by_update.values())
    parts = read_rows(tmp_path / "particles.csv")
    assert list(parts[0])[:3] == ["episode", "particle", "weight"]
    assert sorted({int(r["episode"]) for r in parts}) == [1, 3, 6]
    assert len(parts) == 30


@pytest.mark.slow
def test_online_default_deep_sea_trace_is_valid(tmp_path):
    assert main(["online", "--env", "deep_sea:5", "--episodes", "3", "--out", str(tmp_path)]) == 0
    by_update = {}
    for r in read_rows(tmp_path / "trace.csv"):
        by_update.setdefault(r["update_index"], []).append(r["stage"])
    assert by_update and all(valid_stage_sequence(s) for s in by_update.values())


def test_oracle_output(capsys):
    cfg = ["--env", "two_state", "--eps-target", "0.01", "--n-mc", "20000"]
    assert main(["oracle", *cfg, "--event", "theta_2>theta_1"]) == 0
    out = capsys.readouterr().out
    assert float(out.split()[0].split("=")[1]) > 0.99
    assert main(["oracle", *cfg]) == 0
    assert capsys.readouterr().out.startswith("probability=1.000000")


def test_oracle_closed_form_at_threshold(capsys):
    # r1 - r2 = 1, c = r2 + r4 - r1 - r3 = 1, sigma = 4: k = c / d needs eps = 4
    args = ["oracle", "--env", "five_state:1,0,0,2", "--eps-target", "4", "--event", "theta_1>theta_2", "--closed-form", "--n-mc", "100000"]
    assert main(args) == 0
    lines = dict(line.split("=", 1) for line in capsys.readouterr().out.split() if "=" in line)
    assert float(lines["closed_form"]) == pytest.approx(0.5, abs=1e-12)
    assert abs(float(lines["probability"]) - 0.5) < 4 * float(lines["se"]) + 1e-3


def test_benchmark_small(tmp_path, capsys):
    args = ["benchmark", "--depths", "2,3", "--seeds", "0,1", "--particles", "10", "--mode", "non_adaptive", "--episodes", "60", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = read_rows(tmp_path / "learning_time.csv")
    assert list(rows[0]) == ["depth", "seed", "learning_time", "episodes_run"]
    assert len(rows) == 4 and all(r["learning_time"] for r in rows)
    assert "loglog_slope=" in capsys.readouterr().out
    assert main(["benchmark", "--depths", "0", "--out", str(tmp_path)]) == 2
