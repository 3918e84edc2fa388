"""Command-line front end: config validation, artifacts, reproducibility."""

import json
from pathlib import Path

import pytest

from qdetect import cli
from qdetect.solver import ThresholdError


def base_config(**overrides) -> dict:
    cfg = {
        "schema_version": 1,
        "problem": {
            "wiener_drifts": [1.0],
            "poisson_sources": [{"lam0": 6.0, "lam1": 1.0}],
            "disorder_rate": 1.0,
            "prior": 0.0,
            "delay_cost": 1.0,
        },
        "numerics": {
            "eps": 5e-2,
            "mc": {"n_paths": 512, "master_seed": 3, "target_rel_stderr": 1e-2},
        },
        "simulation": {"n_paths": 2000, "master_seed": 5, "thresholds": [0.0]},
        "output": {"gnuplot": True},
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path: Path, cfg: dict) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfigValidation:
    @pytest.mark.parametrize(
        "mutate",
        [
            lambda c: c.pop("problem"),
            lambda c: c.update(schema_version=99),
            lambda c: c.update(surprise=1),
            lambda c: c["problem"].update(prior=1.2),
            lambda c: c["problem"]["poisson_sources"][0].update(lam0=0.0),
            lambda c: c["numerics"].update(mode="magic"),
            lambda c: c["numerics"].update(eps=-1.0),
            lambda c: c["numerics"]["mc"].pop("master_seed"),
        ],
    )
    def test_invalid_configs_exit_2(self, tmp_path, mutate):
        cfg = base_config()
        mutate(cfg)
        path = write_config(tmp_path, cfg)
        assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_unreadable_config_exits_2(self, tmp_path):
        path = tmp_path / "nope.json"
        assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_oversized_grid_step_exits_2(self, tmp_path):
        cfg = base_config()
        cfg["numerics"]["h"] = 0.5  # far beyond the no-exit limit
        path = write_config(tmp_path, cfg)
        assert cli.main(["solve", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_empty_thresholds_exit_2(self, tmp_path):
        cfg = base_config()
        cfg["simulation"]["thresholds"] = []
        path = write_config(tmp_path, cfg)
        assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_nonpositive_cost_exits_2(self, tmp_path):
        path = write_config(tmp_path, base_config())
        rc = cli.main(
            ["asymptotics", "--config", str(path), "--costs", "0.0,1.0",
             "--out", str(tmp_path / "o")]
        )
        assert rc == 2


@pytest.fixture(scope="module")
def solve_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("solve")
    path = write_config(root, base_config())
    outs = []
    for name in ("a", "b"):
        out = root / name
        assert cli.main(["solve", "--config", str(path), "--out", str(out)]) == 0
        outs.append(out)
    return outs


class TestSolveCommand:
    def test_artifacts_written(self, solve_runs):
        out = solve_runs[0]
        for name in ("value.csv", "thresholds.csv", "risk.csv", "summary.json"):
            assert (out / name).exists()
        # gnuplot mirrors requested in the config
        assert (out / "value.dat").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "ok"
        assert summary["phi_inf"] > 0
        assert summary["certificates"]["risk_bound"] > 0

    def test_headers_carry_hash_and_seed(self, solve_runs):
        first = (solve_runs[0] / "value.csv").read_text().splitlines()[0]
        assert first.startswith("# config_hash=")
        assert "master_seed=3" in first

    def test_reruns_are_byte_identical(self, solve_runs):
        a, b = solve_runs
        for name in ("value.csv", "thresholds.csv", "risk.csv", "summary.json",
                     "value.dat", "risk.dat"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_numerical_diagnostics_exit_3(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise ThresholdError("cumulative integral never changed sign")

        monkeypatch.setattr(cli, "solve", boom)
        path = write_config(tmp_path, base_config())
        out = tmp_path / "o"
        assert cli.main(["solve", "--config", str(path), "--out", str(out)]) == 3
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "error"
        assert "never changed sign" in summary["diagnostic"]


class TestSimulateCommand:
    def test_stop_immediately_risk(self, tmp_path):
        cfg = base_config()
        cfg["problem"]["prior"] = 0.25
        path = write_config(tmp_path, cfg)
        out = tmp_path / "o"
        assert cli.main(["simulate", "--config", str(path), "--out", str(out)]) == 0
        lines = (out / "risk.csv").read_text().splitlines()
        assert lines[1] == "threshold,mean,stderr,censored_count"
        threshold, mean, stderr, censored = lines[2].split(",")
        assert float(threshold) == 0.0
        # immediate alarm: the penalty is exactly the no-change indicator
        assert abs(float(mean) - 0.75) <= 3.0 * float(stderr) + 1e-9
        assert int(censored) == 0


class TestAsymptoticsCommand:
    def test_sweep_rows_are_internally_consistent(self, tmp_path):
        import math

        path = write_config(tmp_path, base_config())
        out = tmp_path / "o"
        rc = cli.main(
            ["asymptotics", "--config", str(path), "--costs", "1.0,2.0",
             "--out", str(out)]
        )
        assert rc == 0
        lines = (out / "asymptotics.csv").read_text().splitlines()
        assert lines[1] == "c,bt_phi,bt_f,phi_inf,U_pi0,U_pi05,U_pi08"
        rows = [list(map(float, ln.split(","))) for ln in lines[2:]]
        assert len(rows) == 2
        for c, bt_phi, bt_f, phi_inf, u0, u05, u08 in rows:
            assert bt_f == pytest.approx(-math.log(c) / bt_phi, rel=1e-9)
            assert phi_inf > 0
            assert 0.0 <= u0 <= 1.0


class TestSelftest:
    def test_default_suite_passes(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_fault_injection_fails_the_wronskian_check(self, tmp_path, capsys):
        cfg = {"schema_version": 1, "problem": base_config()["problem"],
               "fault_injection": "corrupt_psi"}
        path = write_config(tmp_path, cfg)
        assert cli.main(["selftest", "--config", str(path)]) == 1
        out = capsys.readouterr().out
        assert "[FAIL] Wronskian dispersion" in out
