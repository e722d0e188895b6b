import json
import math

import numpy as np
import pytest

from nonlocal_feedback import experiments as ex
from nonlocal_feedback.solver import read_snapshot_csv


def _scenario(**over):
    raw = {
        "name": "t",
        "model": {"rho_bar": 1.0, "k": 0.5, "n_cells": 100, "t_final": 5.0, "velocity": {"kind": "reciprocal"}},
        "initial": {"kind": "perturbation", "shape": "gaussian", "amplitude": 0.05},
        "analyses": ["decay-fit"],
    }
    for key, v in over.items():
        if key in ("model", "initial"):
            raw[key] = {**raw[key], **v}
        else:
            raw[key] = v
    return ex.scenario_from_dict(raw)


def test_equilibrium_scenario(tmp_path):
    s = _scenario(initial={"kind": "constant"}, analyses=["decay-fit", "lyapunov-small-d"])
    summary = ex.run_scenario(s, tmp_path)
    assert summary["initial_l2"] == summary["final_l2"] == 0.0
    assert summary["fit"] is None and not (tmp_path / "fit.json").exists()
    assert summary["extinction_time"] is None
    assert summary["lyapunov-small-d"]["monotone"]


def test_extinction_scenario(tmp_path):
    s = _scenario(model={"rho_bar": 0.0, "k": 0.0}, initial={"kind": "bump", "center": 0.3, "width": 0.2, "mass": 1.0},
                  analyses=["extinction"])
    summary = ex.run_scenario(s, tmp_path)
    assert summary["extinct"]
    assert 0.0 < summary["extinction_displacement"] <= 1.0 + 5.0 / 100
    assert summary["theorem_stable"]


def test_local_decay_scenario(tmp_path):
    s = _scenario(model={"t_final": 20.0, "n_cells": 200}, analyses=["decay-fit", "lyapunov-small-d", "spectrum"])
    summary = ex.run_scenario(s, tmp_path)
    assert summary["d"] == -0.5
    assert summary["fit"]["alpha"] > 0
    assert summary["lyapunov-small-d"]["monotone"]
    assert summary["spectrum"]["s_est"] < 0
    for name in ("trajectory.csv", "fit.json", "monitor_small-d.csv", "roots.csv", "summary.json"):
        assert (tmp_path / name).exists()
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["alpha"] == summary["fit"]["alpha"]


def test_runs_are_byte_identical(tmp_path):
    s = _scenario(analyses=["decay-fit", "lyapunov-small-d"], snapshot_stride=50,
                  initial={"kind": "perturbation", "shape": "random", "amplitude": 0.05}, seed=7)
    ex.run_scenario(s, tmp_path / "a")
    ex.run_scenario(s, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 4
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_random_perturbation_seeded():
    s = _scenario()
    a = ex.InitialProfile(kind="perturbation", shape="random").build(s.cfg, seed=1).cells
    b = ex.InitialProfile(kind="perturbation", shape="random").build(s.cfg, seed=1).cells
    c = ex.InitialProfile(kind="perturbation", shape="random").build(s.cfg, seed=2).cells
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_trajectory_round_trip_through_csv_initial(tmp_path):
    s = _scenario(snapshot_stride=1000, model={"t_final": 1.0})
    ex.run_scenario(s, tmp_path / "run")
    last = sorted((tmp_path / "run" / "snapshots").glob("snapshot_*.csv"))[-1]
    s2 = _scenario(initial={"kind": "csv", "path": str(last)}, model={"t_final": 1.0})
    rho0 = s2.initial.build(s2.cfg)
    ref = read_snapshot_csv(last)
    assert np.max(np.abs(rho0.cells - ref.cells)) <= 1e-15


def test_bump_mass_normalisation():
    s = _scenario(model={"rho_bar": 0.0})
    f = ex.InitialProfile(kind="bump", center=0.5, width=0.3, mass=2.0).build(s.cfg)
    assert f.cells.sum() / f.n == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("raw", [
    {"model": {"rho_bar": 0.0, "k": 0.5, "bogus": 1}},
    {"model": {"rho_bar": 0.0}},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "extra": 1},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "initial": {"kind": "bump", "center": 0.95, "width": 0.2}},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "initial": {"kind": "wave"}},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "initial": {"kind": "constant", "typo": 2}},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "analyses": ["fourier"]},
    {"model": {"rho_bar": 0.0, "k": 0.5}, "method": "spectral"},
    {"model": {"rho_bar": 0.0, "k": 0.5, "velocity": {"kind": "reciprocal", "scale": 2}}},
    {},
])
def test_config_fails_closed(raw):
    with pytest.raises(ex.ConfigError):
        ex.scenario_from_dict(raw)


def test_missing_csv_initial(tmp_path):
    s = _scenario(initial={"kind": "csv", "path": "nope.csv"})
    with pytest.raises(ex.ScenarioError) as info:
        ex.run_scenario(s, tmp_path)
    assert info.value.stage == "initial"


def test_stage_named_on_failure(tmp_path):
    s = _scenario(analyses=["lyapunov-large-d"])  # d = -1/2 has no large-d construction
    with pytest.raises(ex.ScenarioError, match="lyapunov-large-d") as info:
        ex.run_scenario(s, tmp_path)
    assert info.value.stage == "lyapunov-large-d"


def test_load_scenario_from_toml(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('name = "x"\nseed = 3\n[model]\nrho_bar = 0.5\nk = 0.2\n[model.velocity]\nkind = "exponential"\n'
                 'coefficients = [1.0, -0.5]\n[initial]\nkind = "constant"\nvalue = 0.6\n')
    s = ex.load_scenario(p)
    assert s.seed == 3 and s.cfg.lambda_bar == 1.0 and s.cfg.d == pytest.approx(-0.25)
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ex.ConfigError):
        ex.load_scenario(bad)
    with pytest.raises(ex.ConfigError):
        ex.load_scenario(tmp_path / "missing.toml")


def test_region_grid_excludes_margins():
    spec = ex.RegionScanSpec()
    grid = spec.grid()
    assert len(grid) == 182
    assert all(abs(d + 1) >= 0.05 and abs(abs(k) - 1) >= 0.05 for d, k in grid)
    assert (0.0, 0.0) in grid and (-1.5, -1.4) in grid and (2.0, 1.4) in grid


@pytest.mark.parametrize("kw", [dict(d_step=0.0), dict(k_step=-0.1), dict(margin=-0.01), dict(d_min=3.0)])
def test_region_spec_validation(kw):
    with pytest.raises(ex.ConfigError):
        ex.RegionScanSpec(**kw)


def test_region_single_point_with_simulation():
    spec = ex.RegionScanSpec(0.0, 0.0, 1.0, 0.5, 0.5, 1.0, simulate=True, n_cells=400, t_final=20.0)
    (row,) = ex.region_scan(spec)
    assert row["stable"] and row["by_theorem"] and not row["mismatch"]
    assert row["alpha_sim"] == pytest.approx(math.log(2.0), rel=0.1)


def test_region_degenerate_point():
    spec = ex.RegionScanSpec(-1.0, -1.0, 1.0, 0.0, 0.0, 1.0, margin=0.0)
    (row,) = ex.region_scan(spec)
    assert row["s_est"] == 0.0 and not row["by_theorem"] and not row["stable"]


def test_region_parallel_matches_serial(tmp_path):
    spec = ex.RegionScanSpec(-0.5, 1.0, 0.5, -0.6, 0.6, 0.6)
    serial = ex.region_scan(spec, threads=1)
    parallel = ex.region_scan(spec, threads=3)
    assert serial == parallel
    assert [(r["d"], r["k"]) for r in serial] == sorted((r["d"], r["k"]) for r in serial)
    ex.write_region_csv(serial, tmp_path / "region.csv")
    lines = (tmp_path / "region.csv").read_text().splitlines()
    assert lines[0] == "d,k,s_est,stable,by_theorem,mismatch,status"
    assert len(lines) == len(serial) + 1


def test_emit_plot_data(tmp_path):
    s = _scenario(analyses=["spectrum", "lyapunov-small-d"], model={"t_final": 1.0})
    ex.run_scenario(s, tmp_path)
    rows = ex.region_scan(ex.RegionScanSpec(0.0, 0.5, 0.5, 0.0, 0.0, 1.0))
    ex.write_region_csv(rows, tmp_path / "region.csv")
    written = {p.name for p in ex.emit_plot_data(tmp_path)}
    assert {"norms.dat", "region.dat", "spectrum.dat", "plots.gp", "monitor_small-d.dat"} <= written
    norms = np.loadtxt(tmp_path / "norms.dat")
    assert norms.shape[1] == 2
    region = np.loadtxt(tmp_path / "region.dat", ndmin=2)
    assert set(region[:, 2]) <= {0.0, 1.0}
    assert np.loadtxt(tmp_path / "spectrum.dat").shape[1] == 2


def test_emit_plot_data_missing_inputs(tmp_path):
    with pytest.raises(FileNotFoundError):
        ex.emit_plot_data(tmp_path)
    with pytest.raises(FileNotFoundError):
        ex.emit_plot_data(tmp_path / "absent")


def test_perturbation_size_scan():
    rows = ex.perturbation_size_scan(1.0, 0.5, [0.01, 0.1], n_cells=100, t_final=5.0)
    assert [r["amplitude"] for r in rows] == [0.01, 0.1]
    assert all(r["monotone"] and r["alpha"] > 0 for r in rows)
