import io
import json

import pytest

from hmarl.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from hmarl.harness import read_csv, write_csv
from hmarl.scenario import Scenario, save_scenario


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def scen_file(tmp_path):
    path = tmp_path / "s.toml"
    save_scenario(Scenario(training={"ppo": {"hidden": [16, 16]}}).with_env(episode_len=10), path)
    return path


class TestAnalyze:
    def test_reference_point(self):
        code, out, _ = run("analyze", "--K", "2", "--L", "4", "--N", "8")
        assert code == EXIT_OK
        assert "5.14286" in out and "efficient" in out

    def test_csv(self, tmp_path):
        code, _, _ = run("analyze", "--K", "2,3", "--L", "4", "--N", "8", "--csv", str(tmp_path / "t.csv"))
        assert code == EXIT_OK
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 3

    def test_bad_values(self):
        code, _, err = run("analyze", "--K", "0", "--L", "4", "--N", "8")
        assert code == EXIT_USAGE and error_line(err)["exit"] == EXIT_USAGE


class TestErrors:
    def test_help(self, capsys):
        assert run("--help")[0] == EXIT_OK
        assert run("train", "--help")[0] == EXIT_OK
        assert "schema = 1" in capsys.readouterr().out

    def test_missing_scenario_names_path(self, tmp_path):
        code, _, err = run("train", "--scenario", str(tmp_path / "missing.toml"), "--out-dir", str(tmp_path), "--seed", "0")
        assert code == EXIT_INPUT
        assert "missing.toml" in error_line(err)["message"]

    def test_malformed_scenario(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("schema = 1\n[env]\nspeed = 3\n")
        code, _, err = run("replay", "--scenario", str(path), "--trace", str(tmp_path / "t.csv"))
        assert code == EXIT_INPUT and "speed" in error_line(err)["message"]

    @pytest.mark.parametrize("argv", [
        ["train"],
        ["train", "--out-dir", "x", "--bogus"],
        ["sweep", "--kind", "aperture", "--seeds", "1", "--num-seeds", "2", "--out-dir", "x"],
        ["oracle", "--seed", "1", "--users", "0,0;1,1"],
        ["frobnicate"],
    ])
    def test_usage_errors(self, argv):
        code, _, err = run(*argv)
        assert code == EXIT_USAGE
        assert error_line(err)["error"] == "UsageError"


class TestWorkflow:
    def test_train_eval_replay(self, scen_file, tmp_path):
        out_dir = tmp_path / "run"
        code, out, _ = run("train", "--scenario", str(scen_file), "--seed", "1", "--episodes", "1",
                           "--out-dir", str(out_dir), "--trace")
        assert code == EXIT_OK and json.loads(out)["episodes"] == 1
        code, out, _ = run("replay", "--scenario", str(scen_file), "--trace", str(out_dir / "train_trace.csv"))
        assert code == EXIT_OK and json.loads(out)["divergences"] == 0
        code, out, _ = run("eval", "--scenario", str(scen_file), "--checkpoint", str(out_dir / "checkpoint.npz"),
                           "--timesteps", "10", "--out-dir", str(tmp_path / "ev"))
        assert code == EXIT_OK
        assert out.startswith("seed: ")
        assert "mean_rssi_dbm" in json.loads(out.splitlines()[-1])

    def test_replay_divergence_exit_code(self, scen_file, tmp_path):
        run("train", "--scenario", str(scen_file), "--seed", "1", "--episodes", "1", "--out-dir", str(tmp_path), "--trace")
        trace = tmp_path / "train_trace.csv"
        rows = read_csv(trace)
        rows[3]["system_reward_mw"] = repr(2 * float(rows[3]["system_reward_mw"]))
        write_csv(trace, rows)
        code, _, err = run("replay", "--scenario", str(scen_file), "--trace", str(trace))
        assert code == EXIT_NUMERIC
        assert error_line(err)["error"] == "ReplayDivergence"
        assert "step 3" in error_line(err)["message"]

    def test_oracle_overlay(self, tmp_path):
        path = tmp_path / "one.toml"
        path.write_text(
            "schema = 1\n[room]\nlo = [-2.0, -2.0, 1.0]\nhi = [2.0, 2.0, 2.0]\n[ap]\nposition = [0.0, 3.0, 1.8]\n"
            "[env]\nK = 1\nue_lo = [-1.5, -1.5]\nue_hi = [1.5, 1.5]\n"
            "[[reflector]]\nmount_center = [-2.4, 0.5, 1.6]\nmount_normal = [1.0, 0.0, 0.0]\nrows = 1\ncols = 4\nsegments = 1\n"
        )
        code, out, _ = run("oracle", "--scenario", str(path), "--users", "0.5,0.5", "--step", "1.0", "--refine", "0",
                           "--out", str(tmp_path / "best.toml"))
        assert code == EXIT_OK
        assert json.loads(out)["allocation"] == [0]
        assert "[oracle]" in (tmp_path / "best.toml").read_text()

    def test_oracle_budget_exit_code(self, tmp_path):
        code, _, err = run("oracle", "--seed", "0", "--max-evaluations", "10")
        assert code == EXIT_NUMERIC and error_line(err)["error"] == "BudgetExceeded"
