import json
from pathlib import Path

import numpy as np
import pytest

from cmcnet import cli
from cmcnet.config import load_config, parse_config, validate

DEMOS = Path(__file__).resolve().parents[1] / "demos"

FLAT = {
    "metric": {"name": "euclidean"},
    "run": {"r": 1.0, "omega": 1.0, "tau": 0.01},
    "edges": [{"id": "e0", "start": [0.0, 0.0, 0.0], "direction": [1.0, 0.0, 0.0],
               "length": 8.04, "f0": 1.0}],
    "resolution": {"n_phi": 32, "level": 3},
}


def flat(**run):
    data = json.loads(json.dumps(FLAT))
    data["run"].update(run)
    return parse_config(data)


def test_demo_configs_validate():
    for path in sorted(DEMOS.glob("*.toml")):
        assert validate(load_config(path)) == [], path.name


def test_nu_outside_range():
    v = validate(flat(nu=2.5))
    assert any("ν must lie in (1,2)" in s for s in v)


def test_all_violations_reported():
    data = json.loads(json.dumps(FLAT))
    data["run"]["nu"] = 2.5
    data["run"]["r"] = -1.0
    data["edges"].append({"id": "e1", "start": [0, 0, 1], "direction": [0, 1, 0],
                          "length": 1.0, "f0": 0.0})
    data["vertices"] = [{"id": "v0", "point": [0, 0, 0], "edges": [["e0", "start"],
                                                                   ["e9", "start"]]}]
    v = validate(parse_config(data))
    assert any("ν" in s for s in v)
    assert any("r must be positive" in s for s in v)
    assert any("unknown edge 'e9'" in s for s in v)
    assert any("edge 'e1'" in s and "terminal-vertex launches" in s for s in v)


def test_terminal_rules():
    data = json.loads(json.dumps(FLAT))
    data["edges"][0].update(terminal=True, f0=0.5)
    assert any("terminal launch needs f0 = 0" in s for s in validate(parse_config(data)))
    data["edges"][0]["f0"] = 0.0
    assert validate(parse_config(data)) == []


def test_unknown_keys_are_violations():
    data = json.loads(json.dumps(FLAT))
    data["run"]["radius"] = 1.0
    data["edges"][0]["speed"] = 2.0
    v = validate(parse_config(data))
    assert "unknown key 'radius' in [run]" in v
    assert "unknown key 'speed' in edge 0" in v


def test_invalid_config_exit_2(tmp_path):
    assert cli.run(flat(nu=2.5), "all", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_flat_all_zero_interior_residuals(tmp_path):
    assert cli.run(flat(), "all", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"curves.csv", "placement.csv", "necks.csv", "placement.json", "mesh.obj",
            "mesh.ply", "report.json"} <= names
    rep = json.loads((tmp_path / "report.json").read_text())
    interior = rep["notes"]["interior_beads"]
    assert len(interior) == 3
    for q in interior:
        assert np.max(np.abs(rep["bead_residuals"][q])) < 1e-14
    assert len(rep["neck_matrices"]) == 4


def test_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(flat(), "all", a) == 0
    assert cli.run(flat(), "all", b) == 0
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_stage_alone_matches_all(tmp_path):
    assert cli.run(flat(), "all", tmp_path / "a") == 0
    assert cli.run(flat(), "place", tmp_path / "b") == 0
    for name in ("placement.csv", "necks.csv", "placement.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "b" / "mesh.obj").exists()


def test_infeasible_radius_exit_1(tmp_path):
    data = json.loads(json.dumps(FLAT))
    data["edges"][0]["length"] = 8.5
    assert cli.run(parse_config(data), "place", tmp_path) == 1
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["stage"] == "place" and err["edge"] == "e0"
    assert err["closing_tau"] == pytest.approx(-1.54)


def test_error_file_cleared_on_success(tmp_path):
    (tmp_path / "error.json").write_text("{}")
    assert cli.run(flat(), "curves", tmp_path) == 0
    assert not (tmp_path / "error.json").exists()


def test_seeded_perturbation(tmp_path):
    data = json.loads(json.dumps(FLAT))
    data["perturbation"] = {"w_scale": 0.001, "xi_scale": 0.01}
    data["seed"] = 7
    cfg = parse_config(data)
    assert cli.run(cfg, "place", tmp_path / "a") == 0
    assert cli.run(cfg, "place", tmp_path / "b") == 0
    cfg.seed = 8
    assert cli.run(cfg, "place", tmp_path / "c") == 0
    pa = (tmp_path / "a" / "placement.csv").read_bytes()
    assert pa == (tmp_path / "b" / "placement.csv").read_bytes()
    assert pa != (tmp_path / "c" / "placement.csv").read_bytes()


def test_main_flags_and_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text((DEMOS / "flat_edge.toml").read_text())
    monkeypatch.setenv("CMCNET_OUT", str(tmp_path / "env"))
    assert cli.main(["--config", str(cfg), "--command", "curves"]) == 0
    assert (tmp_path / "env" / "curves.csv").exists()
    assert cli.main(["--config", str(cfg), "--command", "curves", "--out",
                     str(tmp_path / "flag"), "--seed", "3", "--workers", "2"]) == 0
    assert (tmp_path / "flag" / "curves.csv").exists()
    assert cli.main(["--config", str(tmp_path / "missing.toml")]) == 2
    assert cli.main(["--config", str(cfg), "--workers", "0"]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\n")
    assert cli.main(["--config", str(bad)]) == 2


def test_add_orders():
    rows = [{"r": r, "residual_rel": 3.0 * r**2} for r in (0.1, 0.05, 0.025)]
    cli.add_orders(rows)
    assert np.isnan(rows[0]["order"])
    np.testing.assert_allclose([rows[1]["order"], rows[2]["order"], rows[0]["fitted_order"]],
                               2.0, rtol=1e-12)


def test_conformal_sweep_has_order_column(tmp_path):
    data = {"metric": {"name": "conformal", "expr": "0.1*x1 + 0.2*sin(x2)*x3 - 0.05*x1^2",
                       "radius": 2.0},
            "run": {"r": 0.1, "omega": -1.0, "adjust_r": True, "mesh": False},
            "edges": [{"id": "e0", "start": [-0.3, 0.1, 0.05], "direction": [1.0, 0.2, -0.1],
                       "length": 0.6, "f0_hat": 0.5}],
            "sweep": {"radii": [0.16, 0.08, 0.04, 0.02]}}
    assert cli.run(parse_config(data), "sweep", tmp_path) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].split(",") == cli.SWEEP_COLUMNS
    assert len(lines) == 5
    fitted = float(lines[1].split(",")[-1])
    assert np.isfinite(fitted)
