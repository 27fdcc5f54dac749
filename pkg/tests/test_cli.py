import csv
import json
from pathlib import Path

import numpy as np
import pytest

from poissonlab.cli import emit_plotdata, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, name, **changes):
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    for k, v in changes.items():
        if v is None:
            cfg.pop(k, None)
        else:
            cfg[k] = v
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(tmp_path, command, cfg, out="out", *extra):
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def test_missing_seed_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, "simulate", seed=None)
    assert run(tmp_path, "simulate", cfg) == 2
    assert "seed" in capsys.readouterr().err


def test_seed_flag_supplies_missing_seed(tmp_path):
    cfg = write_config(tmp_path, "simulate", seed=None, budgets={"n": 20000})
    assert run(tmp_path, "simulate", cfg, "out", "--seed", "5") == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 5


@pytest.mark.parametrize("change", [
    {"model": {"name": "no_such_model"}},
    {"window": {"lower": [0.0]}},
    {"functional": {"name": "cubic"}},
    {"budgets": {"n": 1}},
])
def test_invalid_config_exits_2(tmp_path, change):
    cfg = write_config(tmp_path, "simulate", **change)
    assert run(tmp_path, "simulate", cfg) == 2


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(tmp_path, "simulate", bad) == 2
    assert run(tmp_path, "simulate", tmp_path / "absent.json") == 2


def test_subcommand_needs_its_entries(tmp_path):
    cfg = write_config(tmp_path, "simulate")
    assert run(tmp_path, "duality", cfg) == 2


def test_simulate_counts_match_mass(tmp_path):
    cfg = write_config(tmp_path, "simulate", budgets={"n": 20000})
    assert run(tmp_path, "simulate", cfg) == 0
    out = tmp_path / "out"
    counts = np.array([int(r[1]) for r in read_rows(out / "counts.csv")[1:]])
    assert counts.size == 20000
    assert abs(counts.mean() - 1.0) <= 3 * counts.std(ddof=1) / np.sqrt(counts.size)
    points = read_rows(out / "points.csv")
    assert len(points) - 1 == counts.sum()
    summary = read_rows(out / "summary.csv")
    assert summary[0] == ["quantity", "estimate", "SE", "target", "pass"]
    assert all(r[4] == "pass" for r in summary[1:])
    assert (out / "summary.csv").read_bytes().count(b"\r\n") == len(summary)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and len(manifest["config_sha256"]) == 64
    assert set(manifest["versions"]) >= {"numpy", "scipy", "python"}


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, "girsanov", budgets={"n": 5000})
    assert run(tmp_path, "girsanov-check", cfg, "a", "--workers", "1") == 0
    assert run(tmp_path, "girsanov-check", cfg, "b", "--workers", "3") == 0
    for name in ("summary.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_emit_plotdata_empty(tmp_path):
    paths = emit_plotdata({}, tmp_path / "plots")
    assert len(paths) == 1 and paths[0].read_text() == ""


def test_emit_plotdata_series(tmp_path):
    paths = emit_plotdata({"s": [(1, 2.5), (2, 3.5)]}, tmp_path / "plots")
    assert paths[0].read_text().splitlines() == ["1.0 2.5", "2.0 3.5"]


def test_clark_ocone_linear_small(tmp_path):
    cfg = write_config(tmp_path, "clark_ocone", functional={"name": "linear", "lower": [0.0], "upper": [5.0]},
                       window={"lower": [0.0], "upper": [5.0]}, grids=[2, 4],
                       budgets={"n_outer": 100, "n_inner": 10})
    assert run(tmp_path, "clark-ocone", cfg) == 0
    series = np.loadtxt(tmp_path / "out" / "plotdata" / "residual_vs_m.txt", ndmin=2)
    assert list(series[:, 0]) == [2.0, 4.0]


def test_transport_check(tmp_path):
    cfg = write_config(tmp_path, "transport", options={"test_weights": 5, "configurations": 10})
    assert run(tmp_path, "transport-check", cfg) == 0
    assert (tmp_path / "out" / "summary.csv").exists()


def test_duality_constant_and_scan(tmp_path):
    cfg = write_config(tmp_path, "duality", functional={"name": "constant", "c": 0.4},
                       budgets={"n": 2000, "n_inner": 20,
                                "optimizer": {"restarts": 1, "maxfev": 20, "n_check": 500, "n_random": 3}},
                       options={"scan_points": 9, "scan_n": 2000})
    assert run(tmp_path, "duality", cfg) == 0
    out = tmp_path / "out"
    assert read_rows(out / "parameters.csv")[0] == ["index", "value"]
    trace = np.loadtxt(out / "plotdata" / "dual_trace.txt", ndmin=2)
    assert trace.shape[1] == 2


def test_duality_scan_is_convex_with_interior_minimum(tmp_path):
    cfg = write_config(tmp_path, "duality",
                       budgets={"n": 20000, "n_inner": 20,
                                "optimizer": {"restarts": 1, "maxfev": 10, "n_check": 500, "n_random": 2}},
                       options={"scan_points": 15, "scan_n": 100000})
    run(tmp_path, "duality", cfg)
    scan = np.loadtxt(tmp_path / "out" / "plotdata" / "dual_vs_theta.txt")
    x, y, se = scan.T
    assert np.all(np.diff(y, 2) >= -4 * se[1:-1])
    k = int(np.argmin(y))
    assert 0 < k < y.size - 1
    assert abs(x[k] - (np.exp(-1) - 1)) <= x[1] - x[0]
