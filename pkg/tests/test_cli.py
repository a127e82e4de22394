import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from futbasis.cli import ConfigError, main, parse_config, sweep_market

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "two_pairs.yaml"


def write_config(tmp_path, **overrides):
    cfg = yaml.safe_load(CONFIG.read_text())
    for key, val in overrides.items():
        section, _, field = key.partition("__")
        if field:
            cfg.setdefault(section, {})[field] = val
        else:
            cfg[section] = val
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return header, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def test_simulate_shape_and_determinism(tmp_path):
    cfg = write_config(tmp_path, simulation__n_paths=1)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "9"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "9"]) == 0
    header, rows = read_csv(tmp_path / "a" / "paths.csv")
    assert rows.shape == (51, 2 + 3 * 2)  # path index, t, then z, s, f per asset
    assert header[:2] == ["path", "t"]
    for name in ("paths.csv", "coverage.csv", "ellipse_t0.15.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest_simulate.json").read_text())
    assert manifest["seed"] == 9 and len(manifest["config_sha256"]) == 64
    assert "paths.csv" in manifest["files"]


def test_simulate_coverage(tmp_path):
    assert main(["simulate", "--config", str(CONFIG), "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "coverage.csv")
    np.testing.assert_allclose(rows[:, 0], [0.05, 0.15, 0.25])
    assert np.all((rows[:, 2] >= 0.922) & (rows[:, 2] <= 0.974))


def test_solve_outputs(tmp_path):
    cfg = write_config(tmp_path, solver__n_steps=500)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    for v in ("futures", "full"):
        header, rows = read_csv(tmp_path / f"solution_{v}.csv")
        assert header[0] == "tau" and rows.shape == (501, 8)
        assert np.all(rows[0, 1:] == 0)


def test_solve_near_log_utility(tmp_path):
    cfg = write_config(tmp_path, preferences={"gamma": 1.0001}, solver__n_steps=500)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path), "--variant", "full"]) == 0
    assert not (tmp_path / "solution_futures.csv").exists()


def test_ce_outputs(tmp_path):
    cfg = write_config(tmp_path, ce={"times": [0.15, 0.25], "resolution": 61, "curve_points": 6},
                       solver__n_steps=1000)
    assert main(["ce", "--config", cfg, "--out", str(tmp_path), "--variant", "futures"]) == 0
    _, surface = read_csv(tmp_path / "ce_futures_t0.25.csv")
    np.testing.assert_allclose(surface[:, 2], 1.0, rtol=1e-15)
    header, ext = read_csv(tmp_path / "ce_extremes_futures.csv")
    assert header[:3] == ["t", "ce_min", "ce_max"]
    assert np.all(ext[:, 1] <= ext[:, 2])


def test_strategy_outputs(tmp_path):
    cfg = write_config(tmp_path, ce={"times": [0.05], "resolution": 41}, solver__n_steps=500)
    assert main(["strategy", "--config", cfg, "--out", str(tmp_path)]) == 0
    header, rows = read_csv(tmp_path / "positions_full_t0.05.csv")
    assert header == ["z_1", "z_2", "theta_1", "theta_2", "pi_1", "pi_2"]
    header, rows = read_csv(tmp_path / "positions_futures_t0.05.csv")
    assert header == ["z_1", "z_2", "theta_1", "theta_2"]
    # deep contango in the first pair means a short first futures position
    assert np.all(rows[rows[:, 0] == rows[:, 0].max(), 2] < 0)


def test_backtest_outputs(tmp_path):
    cfg = write_config(tmp_path, simulation__n_paths=40, solver__n_steps=500)
    assert main(["backtest", "--config", cfg, "--out", str(tmp_path), "--variant", "full"]) == 0
    report = json.loads((tmp_path / "report_full.json").read_text())
    assert report["n_paths"] == 40 and report["seed"] == 2024
    _, wealth = read_csv(tmp_path / "wealth_full.csv")
    assert wealth.shape == (40 * 51, 3)
    _, dens = read_csv(tmp_path / "kde_full.csv")
    assert dens.shape == (512, 2)


def test_sweeps(tmp_path):
    cases = {
        "gamma": [0.1, 1.0, 1.5, 3.0],
        "kappa_scale": [0.01, 0.5, 1.5],
        "maturity_gap": [0.005, 0.02],
    }
    for name, values in cases.items():
        out = tmp_path / name
        cfg = write_config(tmp_path, sweep={"parameter": name, "values": values}, solver__n_steps=1000)
        assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "parameter,value,variant,status,ce"
        rows = [l.split(",") for l in lines[1:]]
        assert len(rows) == 2 * len(values)
        ce = {(float(r[1]), r[2]): (r[3], float(r[4])) for r in rows}
        for v in ("futures", "full"):
            if name == "gamma":
                assert ce[(0.1, v)][0] == "nirvana_detected"
                assert ce[(1.0, v)][0] == "undefined_at_log_utility"
                assert ce[(1.5, v)][1] > ce[(3.0, v)][1]
            elif name == "kappa_scale":
                assert ce[(0.01, v)][1] < ce[(0.5, v)][1] < ce[(1.5, v)][1]
            else:
                assert ce[(0.005, v)][1] > ce[(0.02, v)][1]


def test_kappa_sweep_semantics(params):
    p = sweep_market(params, "kappa_scale", 0.4)
    np.testing.assert_allclose(p.eta_f, [-0.4, -0.6])
    np.testing.assert_allclose(p.eta_s, 0.0)
    p = sweep_market(params, "maturity_gap", 0.03)
    np.testing.assert_allclose(p.maturities, [0.28, 0.26])


def test_invalid_configs(tmp_path, capsys):
    cfg = write_config(tmp_path, market__eta_f=[0.0, 0.0])
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "kappa must be positive" in capsys.readouterr().err
    cfg = write_config(tmp_path, sweep={"parameter": "maturity_gap", "values": [0.0, 0.01]})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 2
    cfg = write_config(tmp_path, preferences={"gamma": 0.5})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("market: [1, 2")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.yaml")]) == 4
    with pytest.raises(ConfigError):
        parse_config({"market": {"rate": 0.01}})


def test_no_overwrite(tmp_path):
    cfg = write_config(tmp_path, solver__n_steps=100)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    before = (tmp_path / "solution_full.csv").read_bytes()
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 4
    assert (tmp_path / "solution_full.csv").read_bytes() == before
    assert main(["solve", "--config", cfg, "--out", str(tmp_path), "--overwrite"]) == 0


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import futbasis.cli as cli
    from futbasis.odesolve import NumericalFailure

    def boom(*a, **k):
        raise NumericalFailure("Riccati solution blew up", 0.1)

    monkeypatch.setattr(cli, "solve", boom)
    assert main(["solve", "--config", str(CONFIG), "--out", str(tmp_path)]) == 3


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "futbasis.cli", "--help"], capture_output=True, text=True, check=True
    )
    assert "simulate" in out.stdout and "sweep" in out.stdout
