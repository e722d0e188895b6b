"""Scenario orchestration, parameter scans and result export."""

from __future__ import annotations

import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import lyapunov as lyap
from . import spectral
from .core_model import ClosedLoopConfig, ModelError, VelocityModel, equilibrium_summary, velocity_from_config
from .solver import (DensityField, NumericalError, read_snapshot_csv, simulate, weak_residual, write_snapshots,
                     write_trajectory_csv)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

ANALYSES = ("lyapunov-small-d", "lyapunov-large-d", "decay-fit", "weak-residual", "spectrum", "extinction")


class ConfigError(ValueError):
    pass


class ScenarioError(RuntimeError):
    """Failure of one stage of a scenario run."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def _write_lines(path: Path, lines: list[str]):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# -- initial profiles ----------------------------------------------------------------


@dataclass(frozen=True)
class InitialProfile:
    """Initial data recipe.

    kinds: ``constant`` (value), ``bump`` (center, width, height or mass; cos^2
    shape added to ``base``), ``perturbation`` (shape in sine | gaussian |
    random, amplitude, about rho_bar) and ``csv`` (a ``x,rho`` snapshot file).
    """

    kind: str = "constant"
    value: Optional[float] = None
    center: float = 0.5
    width: float = 0.2
    height: Optional[float] = None
    mass: Optional[float] = None
    base: float = 0.0
    shape: str = "sine"
    amplitude: float = 0.05
    modes: int = 4
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("constant", "bump", "perturbation", "csv"):
            raise ConfigError(f"unknown initial kind {self.kind!r}")
        if self.kind == "bump":
            if not (0.0 <= self.center <= 1.0) or not (0.0 < self.width <= 1.0):
                raise ConfigError("bump center must lie in [0,1] and width in (0,1]")
            if self.center - self.width / 2 < 0.0 or self.center + self.width / 2 > 1.0:
                raise ConfigError("bump support must lie inside [0,1]")
            if self.height is not None and self.mass is not None:
                raise ConfigError("give bump height or mass, not both")
        if self.kind == "perturbation" and self.shape not in ("sine", "gaussian", "random"):
            raise ConfigError(f"unknown perturbation shape {self.shape!r}")
        if self.kind == "csv" and self.path is None:
            raise ConfigError("csv initial data needs 'path'")

    def build(self, cfg: ClosedLoopConfig, seed: int = 0, base_dir: Optional[Path] = None) -> DensityField:
        n = cfg.n_cells
        rb = cfg.rho_bar
        if self.kind == "constant":
            return DensityField.constant(rb if self.value is None else self.value, n)
        if self.kind == "bump":
            c, w = self.center, self.width
            if self.mass is not None:
                h = 2.0 * self.mass / w  # cos^2 bump integrates to h w / 2
            else:
                h = 1.0 if self.height is None else self.height

            def fn(x):
                z = (x - c) / w
                return self.base + np.where(np.abs(z) < 0.5, h * np.cos(np.pi * z) ** 2, 0.0)
            return DensityField.from_profile(fn, n)
        if self.kind == "perturbation":
            amp = self.amplitude
            if self.shape == "sine":
                return DensityField.from_profile(lambda x: rb + amp * np.sin(2 * np.pi * x), n)
            if self.shape == "gaussian":
                return DensityField.from_profile(
                    lambda x: rb + amp * np.exp(-((x - self.center) / 0.15) ** 2), n)
            rng = np.random.default_rng(seed)
            coef = rng.standard_normal((self.modes, 2))
            coef /= np.abs(coef).sum()

            def fn(x):
                out = np.zeros_like(x)
                for m in range(self.modes):
                    out += coef[m, 0] * np.sin((m + 1) * np.pi * x) + coef[m, 1] * np.cos((m + 1) * np.pi * x)
                return rb + amp * out
            return DensityField.from_profile(fn, n)
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"initial data file not found: {path}")
        fld = read_snapshot_csv(path)
        if fld.n != n:
            raise ConfigError(f"{path} has {fld.n} cells, model expects {n}")
        return fld


# -- scenarios -------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    cfg: ClosedLoopConfig
    initial: InitialProfile
    analyses: tuple = ()
    method: str = "upwind"
    seed: int = 0
    snapshot_stride: int = 0
    base_dir: Optional[Path] = None

    def __post_init__(self):
        bad = set(self.analyses) - set(ANALYSES)
        if bad:
            raise ConfigError(f"unknown analyses {sorted(bad)}")
        if self.method not in ("upwind", "characteristic"):
            raise ConfigError(f"unknown method {self.method!r}")


_MODEL_KEYS = {"rho_bar", "k", "n_cells", "cfl", "t_final", "record_every", "freeze_velocity", "velocity"}
_INITIAL_KEYS = {"kind", "value", "center", "width", "height", "mass", "base", "shape", "amplitude", "modes", "path"}
_TOP_KEYS = {"name", "method", "analyses", "seed", "snapshot_stride", "model", "initial", "spectrum", "region"}


def model_from_dict(m: dict, base_dir: Optional[Path] = None) -> ClosedLoopConfig:
    _check_keys(m, _MODEL_KEYS, "model")
    if "rho_bar" not in m or "k" not in m:
        raise ConfigError("[model] needs rho_bar and k")
    try:
        vel = velocity_from_config(dict(m.get("velocity", {})), float(m["rho_bar"]), base_dir)
        return ClosedLoopConfig(
            rho_bar=float(m["rho_bar"]), k=float(m["k"]), velocity=vel,
            n_cells=int(m.get("n_cells", 200)), cfl=float(m.get("cfl", 0.9)),
            t_final=float(m.get("t_final", 10.0)), record_every=int(m.get("record_every", 1)),
            freeze_velocity=bool(m.get("freeze_velocity", False)),
        )
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_dict(raw: dict, base_dir: Optional[Path] = None) -> Scenario:
    _check_keys(raw, _TOP_KEYS, "top level")
    if "model" not in raw:
        raise ConfigError("missing [model] section")
    cfg = model_from_dict(raw["model"], base_dir)
    init = dict(raw.get("initial", {"kind": "constant"}))
    _check_keys(init, _INITIAL_KEYS, "initial")
    return Scenario(
        name=str(raw.get("name", "scenario")), cfg=cfg, initial=InitialProfile(**init),
        analyses=tuple(raw.get("analyses", ())), method=str(raw.get("method", "upwind")),
        seed=int(raw.get("seed", 0)), snapshot_stride=int(raw.get("snapshot_stride", 0)),
        base_dir=base_dir,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    return scenario_from_dict(load_config(path), path.parent)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(name, exc) from exc


def _weak_test_function(tau: float):
    return (lambda t, x: (tau - t) * (1.0 - x),
            lambda t, x: -(1.0 - x) + 0.0 * t,
            lambda t, x: -(tau - t) + 0.0 * x)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def run_scenario(s: Scenario, out_dir) -> dict:
    """Simulate, run the requested analyses and write all artifacts to ``out_dir``.

    Returns the summary record (also written as ``summary.json``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = s.cfg
    eq = _stage("equilibrium", equilibrium_summary, cfg.rho_bar, cfg.velocity)
    rho0 = _stage("initial", s.initial.build, cfg, s.seed, s.base_dir)
    traj = _stage("simulate", simulate, cfg, rho0, s.method)
    _stage("export", write_trajectory_csv, traj, out / "trajectory.csv")
    if s.snapshot_stride > 0:
        _stage("export", write_snapshots, traj, out / "snapshots", s.snapshot_stride)

    summary: dict = {
        "name": s.name, "method": s.method, "rho_bar": cfg.rho_bar, "k": cfg.k, "d": eq.d + 0.0,
        "lambda_bar": eq.lambda_bar, "freeze_velocity": cfg.freeze_velocity, "n_cells": cfg.n_cells,
        "t_final": float(traj.times[-1]), "steps": traj.n_steps,
        "initial_l2": float(traj.l2_norm[0]), "final_l2": float(traj.l2_norm[-1]),
        "initial_l1": float(traj.l1_norm[0]), "final_l1": float(traj.l1_norm[-1]),
        "theorem_stable": spectral.stability_predicate(eq.d, cfg.k),
        "extinction_time": traj.extinction_time,
        "extinction_displacement": traj.extinction_displacement,
        "fit": None,
    }
    trivial = traj.l2_norm[0] == 0.0

    if "decay-fit" in s.analyses and not trivial:
        fit = _stage("decay-fit", lyap.fit_decay_rate, traj, "l2")
        (out / "fit.json").write_text(fit.to_json() + "\n")
        summary["fit"] = {"alpha": _clean(fit.alpha), "c": _clean(fit.c), "r2": _clean(fit.r_squared),
                          "window": list(fit.window), "extinct": fit.extinct,
                          "extinction_time": fit.extinction_time}

    for name in ("lyapunov-small-d", "lyapunov-large-d"):
        if name not in s.analyses:
            continue

        def _mon(name=name):
            if name == "lyapunov-small-d":
                case = lyap.select_beta_zero(cfg.k) if cfg.rho_bar == 0 else lyap.select_beta(eq.d, cfg.k)
            else:
                case = lyap.large_d_case(eq.d, cfg.k)
            m = lyap.monitor(traj, case)
            lyap.write_monitor_csv(m, out / f"monitor_{name.split('-', 1)[1]}.csv")
            return case, m
        case, m = _stage(name, _mon)
        summary[name] = {"monotone": m.monotone(), "max_relative_increase": m.relative_max_increase,
                         "initial": float(m.values[0]), "final": float(m.values[-1]),
                         **({"beta": case.beta, "a": case.a} if name.endswith("small-d") else {"A": case.A})}

    if "weak-residual" in s.analyses:
        tau = float(traj.times[-1])
        phi, phi_t, phi_x = _weak_test_function(tau)
        summary["weak_residual"] = _stage("weak-residual", weak_residual, traj, phi, phi_t, phi_x, tau)

    if "spectrum" in s.analyses:
        est = _stage("spectrum", spectral.spectral_abscissa, eq.d, cfg.k, 8, eq.lambda_bar)
        if est.roots_used is not None:
            spectral.write_roots_csv(est.roots_used, out / "roots.csv")
        summary["spectrum"] = {"s_est": _clean(est.s_est), "physical_rate": _clean(est.physical_rate),
                               "asymptote": _clean(est.asymptote), "degenerate": est.degenerate,
                               "low_confidence": est.low_confidence}

    if "extinction" in s.analyses:
        summary["extinct"] = traj.extinction_time is not None
        summary["extinction_dx"] = cfg.dx

    with open(out / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return summary


# -- region scans ---------------------------------------------------------------


@dataclass(frozen=True)
class RegionScanSpec:
    d_min: float = -1.5
    d_max: float = 2.0
    d_step: float = 0.25
    k_min: float = -1.4
    k_max: float = 1.4
    k_step: float = 0.2
    margin: float = 0.05
    n_modes: int = 8
    simulate: bool = False
    n_cells: int = 400
    t_final: float = 20.0
    cfl: float = 0.9

    def __post_init__(self):
        if self.d_step <= 0 or self.k_step <= 0:
            raise ConfigError("grid steps must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.d_max < self.d_min or self.k_max < self.k_min:
            raise ConfigError("grid max below min")

    def grid(self) -> list[tuple[float, float]]:
        ds = _axis(self.d_min, self.d_max, self.d_step)
        ks = _axis(self.k_min, self.k_max, self.k_step)
        return [(d, k) for d in ds for k in ks
                if abs(d + 1.0) >= self.margin and abs(abs(k) - 1.0) >= self.margin]


def _axis(lo: float, hi: float, step: float) -> list[float]:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 12) for i in range(n)]


def region_spec_from_dict(raw: dict) -> RegionScanSpec:
    allowed = set(RegionScanSpec.__dataclass_fields__)
    _check_keys(raw, allowed, "region")
    return RegionScanSpec(**raw)


def linear_regime_config(d: float, k: float, n_cells: int = 400, t_final: float = 20.0,
                         cfl: float = 0.9) -> ClosedLoopConfig:
    """Frozen-velocity config with ``rho_bar = 1``, ``lam(rho_bar) = 1`` and the requested ``d``."""
    v = VelocityModel.exponential(1.0, d, 1.0)
    return ClosedLoopConfig(1.0, k, v, n_cells=n_cells, cfl=cfl, t_final=t_final, freeze_velocity=True)


def linear_regime_initial(n_cells: int) -> DensityField:
    return DensityField.from_profile(lambda x: 1.0 + 0.1 * np.exp(-((x - 0.4) / 0.12) ** 2), n_cells)


def _scan_point(args) -> dict:
    d, k, spec = args
    row = {"d": d, "k": k, "s_est": math.nan, "stable": False, "by_theorem": spectral.stability_predicate(d, k),
           "status": "ok"}
    try:
        v = spectral.classify_stability(d, k, spec.n_modes)
        row.update(s_est=v.s_est, stable=v.stable)
        if v.low_confidence:
            row["status"] = "low-confidence"
    except Exception as exc:  # recorded in-row, scan continues
        row["status"] = f"error: {type(exc).__name__}"
    if spec.simulate:
        row["alpha_sim"] = math.nan
        try:
            cfg = linear_regime_config(d, k, spec.n_cells, spec.t_final, spec.cfl)
            cfg = replace(cfg, store_snapshots=False)
            fit = lyap.fit_decay_rate(simulate(cfg, linear_regime_initial(spec.n_cells)))
            row["alpha_sim"] = fit.alpha
        except NumericalError as exc:
            row["status"] = f"sim-{type(exc).__name__}"
    row["mismatch"] = row["stable"] != row["by_theorem"]
    return row


def region_scan(spec: RegionScanSpec, threads: int = 1) -> list[dict]:
    """Classify every grid point; rows sorted by ``(d, k)`` regardless of completion order."""
    tasks = [(d, k, spec) for d, k in spec.grid()]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_scan_point, tasks, chunksize=4))
    else:
        rows = [_scan_point(t) for t in tasks]
    rows.sort(key=lambda r: (r["d"], r["k"]))
    return rows


def write_region_csv(rows: list[dict], path, with_alpha: bool = False):
    cols = ["d", "k", "s_est", "stable", "by_theorem", "mismatch"] + (["alpha_sim"] if with_alpha else []) + ["status"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c, math.nan)) for c in cols))
    _write_lines(Path(path), lines)


def perturbation_size_scan(rho_bar: float, k: float, amplitudes: Sequence[float],
                           velocity: Optional[VelocityModel] = None, n_cells: int = 200,
                           t_final: float = 20.0, shape: str = "gaussian") -> list[dict]:
    """Monotone-decay check of the matching Lyapunov functional for growing perturbations.

    The largest amplitude with a monotone functional is an empirical estimate
    only, not the theoretical basin size.
    """
    velocity = velocity or VelocityModel.reciprocal(rho_bar)
    out = []
    for amp in amplitudes:
        cfg = ClosedLoopConfig(rho_bar, k, velocity, n_cells=n_cells, t_final=t_final)
        rho0 = InitialProfile(kind="perturbation", shape=shape, amplitude=amp).build(cfg)
        row = {"amplitude": amp, "monotone": False, "alpha": math.nan, "status": "ok"}
        try:
            traj = simulate(cfg, rho0)
            case = lyap.choose_case(cfg.d, k)
            row["monotone"] = lyap.monitor(traj, case).monotone()
            row["alpha"] = lyap.fit_decay_rate(traj).alpha
        except (NumericalError, ModelError) as exc:
            row["status"] = f"error: {exc}"
        out.append(row)
    return out


# -- plot data ------------------------------------------------------------------


def _read_csv(path: Path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows


def emit_plot_data(artifact_dir) -> list[Path]:
    """Convert CSV artifacts to whitespace-separated ``.dat`` files plus a gnuplot script."""
    d = Path(artifact_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no artifact directory {d}")
    written: list[Path] = []
    plots: list[str] = []
    traj = d / "trajectory.csv"
    if traj.exists():
        h, rows = _read_csv(traj)
        it, il2 = h.index("t"), h.index("l2")
        _write_lines(d / "norms.dat", ["# t l2"] + [f"{r[it]} {r[il2]}" for r in rows])
        written.append(d / "norms.dat")
        plots.append("set logscale y; plot 'norms.dat' using 1:2 with lines title 'L2 deviation'; unset logscale y")
    region = d / "region.csv"
    if region.exists():
        h, rows = _read_csv(region)
        idd, ik, ist = h.index("d"), h.index("k"), h.index("stable")
        _write_lines(d / "region.dat", ["# d k stable"] + [f"{r[idd]} {r[ik]} {r[ist]}" for r in rows])
        written.append(d / "region.dat")
        plots.append("plot 'region.dat' using 1:2:3 with points pt 7 palette title 'stable'")
    roots = d / "roots.csv"
    if roots.exists():
        h, rows = _read_csv(roots)
        ire, iim = h.index("re"), h.index("im")
        _write_lines(d / "spectrum.dat", ["# re im"] + [f"{r[ire]} {r[iim]}" for r in rows])
        written.append(d / "spectrum.dat")
        plots.append("plot 'spectrum.dat' using 1:2 with points pt 7 title 'eigenvalues'")
    for mon in sorted(d.glob("monitor_*.csv")):
        h, rows = _read_csv(mon)
        dat = mon.with_suffix(".dat")
        _write_lines(dat, ["# t functional"] + [f"{r[0]} {r[1]}" for r in rows])
        written.append(dat)
        plots.append(f"set logscale y; plot '{dat.name}' using 1:2 with lines title '{mon.stem}'; unset logscale y")
    if not written:
        raise FileNotFoundError(f"no CSV artifacts in {d}")
    _write_lines(d / "plots.gp", ["set terminal pngcairo size 900,600", "set output 'plots.png'", "set multiplot layout 2,2"]
                 + plots + ["unset multiplot"])
    written.append(d / "plots.gp")
    return written
