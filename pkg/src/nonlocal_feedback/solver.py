"""Time integration of the closed loop: explicit upwind and characteristic solvers.

Both solvers freeze the nonlocal speed ``lam(W)`` over a step only in the
upwind case; the characteristic solver couples ``W`` and the characteristic
position ``xi`` through a fixed-point iteration (trapezoidal in time).

With ``cfg.freeze_velocity`` the speed is the constant ``lam(rho_bar)`` and the
inflow boundary is the linearised law
``rho(t,0) - rho_bar = k (rho(t,1) - rho_bar) + (k-1) d (W - rho_bar)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid

from .core_model import ClosedLoopConfig, ModelError, feedback_influx

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e12
EXTINCTION_RATIO = 1e-8

_GAUSS3_NODES = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


class NumericalError(RuntimeError):
    """Scheme failure: nonpositive speed, blow-up, fixed-point stall."""


class BlowUpError(NumericalError):
    pass


@dataclass(frozen=True)
class DensityField:
    t: float
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=float)
        if cells.ndim != 1 or cells.size < 2:
            raise ModelError("cells must be a 1-D array with at least 2 entries")
        if not np.all(np.isfinite(cells)):
            raise NumericalError(f"non-finite density at t={self.t}")
        object.__setattr__(self, "cells", cells)

    @property
    def n(self) -> int:
        return self.cells.size

    @property
    def dx(self) -> float:
        return 1.0 / self.cells.size

    @property
    def x(self) -> np.ndarray:
        return cell_centers(self.cells.size)

    @classmethod
    def constant(cls, value: float, n: int, t: float = 0.0) -> "DensityField":
        return cls(t, np.full(n, float(value)))

    @classmethod
    def from_profile(cls, fn: Callable, n: int, t: float = 0.0) -> "DensityField":
        """Cell averages of ``fn`` by 3-point Gauss quadrature on each cell."""
        dx = 1.0 / n
        mid = cell_centers(n)
        pts = mid[:, None] + 0.5 * dx * _GAUSS3_NODES[None, :]
        vals = np.asarray(fn(pts), dtype=float)
        if vals.shape != pts.shape:
            vals = np.broadcast_to(vals, pts.shape)
        return cls(t, 0.5 * (vals * _GAUSS3_WEIGHTS).sum(axis=1))


def cell_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def total_mass(f: DensityField) -> float:
    """Midpoint sum ``dx * sum(cells)``; exact for cell averages."""
    return float(f.cells.sum() * f.dx)


@dataclass
class TrajectoryRecord:
    """Recorded time series of one run.

    ``speed`` is ``lam(W(t))`` (or ``lam(rho_bar)`` when frozen) and
    ``displacement`` the accumulated characteristic shift ``int lam dt``.
    """

    cfg: ClosedLoopConfig
    method: str
    times: np.ndarray
    W: np.ndarray
    u: np.ndarray
    y: np.ndarray
    l1_norm: np.ndarray
    l2_norm: np.ndarray
    linf_norm: np.ndarray
    speed: np.ndarray
    displacement: np.ndarray
    snapshots: Optional[np.ndarray] = None
    extinction_time: Optional[float] = None
    extinction_displacement: Optional[float] = None
    n_steps: int = 0

    def __len__(self):
        return self.times.size

    def field(self, i: int) -> DensityField:
        if self.snapshots is None:
            raise ModelError("trajectory was recorded without snapshots")
        return DensityField(float(self.times[i]), self.snapshots[i])

    @property
    def final(self) -> DensityField:
        return self.field(-1)


def _speed(W: float, cfg: ClosedLoopConfig) -> float:
    try:
        lam = cfg.lambda_bar if cfg.freeze_velocity else float(cfg.velocity.lam(W))
    except ModelError as exc:
        raise NumericalError(f"state left the velocity model's range: {exc}") from exc
    if not lam > 0.0:
        raise NumericalError(f"nonpositive speed lam(W={W:g}) = {lam:g}")
    return lam


def _inflow_density(rho_out, W, lam, cfg: ClosedLoopConfig):
    """Density entering at x = 0 given the outflow density and total mass."""
    if cfg.freeze_velocity:
        rb = cfg.rho_bar
        return rb + cfg.k * (rho_out - rb) + (cfg.k - 1.0) * cfg.d * (W - rb)
    return feedback_influx(rho_out * lam, cfg) / lam


def boundary_fluxes(f: DensityField, cfg: ClosedLoopConfig) -> tuple[float, float, float]:
    """``(lam, u, y)`` for the upwind representation (outflux from the last cell)."""
    W = total_mass(f)
    lam = _speed(W, cfg)
    rho_out = f.cells[-1]
    y = rho_out * lam
    if cfg.freeze_velocity:
        u = lam * _inflow_density(rho_out, W, lam, cfg)
    else:
        u = feedback_influx(y, cfg)
    return lam, float(u), float(y)


def step_upwind(f: DensityField, cfg: ClosedLoopConfig, t_stop: Optional[float] = None) -> DensityField:
    """One explicit first-order upwind step with the speed frozen at ``lam(W(t))``.

    The step is ``cfl * dx / lam``, shortened to land on ``t_stop`` if given.
    Discrete mass balance ``W(t+dt) - W(t) = dt (u - y)`` holds by construction.
    """
    lam, u, y = boundary_fluxes(f, cfg)
    dx = f.dx
    dt = cfg.cfl * dx / lam
    if t_stop is not None:
        dt = min(dt, t_stop - f.t)
        if dt <= 0.0:
            raise ModelError("t_stop is not ahead of the field time")
    flux = np.empty(f.n + 1)
    flux[0] = u
    flux[1:] = lam * f.cells
    new = f.cells - (dt / dx) * np.diff(flux)
    return DensityField(f.t + dt, new)


# -- characteristic solver -------------------------------------------------


@dataclass
class BoundaryTraceHistory:
    """State of the characteristic solver.

    Holds the characteristic position ``xi(t) = int_0^t lam(W) ds`` together
    with past samples ``(t_j, xi_j, rho(t_j, 1), W_j)``. The density anywhere is
    recovered from the initial profile (for ``x >= xi``) or from the sample at
    ``xi_j = xi - x`` through the feedback law (for ``x < xi``). Samples older
    than one domain crossing are discarded.
    """

    t: float
    xi: float
    W: float
    rho0_x: np.ndarray
    rho0_v: np.ndarray
    hist_t: list = field(default_factory=list)
    hist_xi: list = field(default_factory=list)
    hist_out: list = field(default_factory=list)
    hist_W: list = field(default_factory=list)
    hist_in: list = field(default_factory=list)

    def prune(self, keep: float = 1.0):
        cut = self.xi - keep
        xs = self.hist_xi
        i = int(np.searchsorted(xs, cut, side="right")) - 2
        if i > 0:
            for lst in (self.hist_t, self.hist_xi, self.hist_out, self.hist_W, self.hist_in):
                del lst[:i]

    @property
    def span(self) -> float:
        return self.hist_xi[-1] - self.hist_xi[0] if self.hist_xi else 0.0


def _initial_profile_points(f: DensityField):
    """Initial profile as point values on [0, 1], linearly extended to the ends."""
    x = f.x
    v = f.cells
    left = v[0] - 0.5 * (v[1] - v[0])
    right = v[-1] + 0.5 * (v[-1] - v[-2])
    return np.concatenate(([0.0], x, [1.0])), np.concatenate(([left], v, [right]))


def _eval_characteristic(h: BoundaryTraceHistory, xi: float, x: np.ndarray,
                         extra_xi: Optional[float] = None, extra_in: Optional[float] = None):
    """Evaluate the characteristic formula at positions ``x`` for position ``xi``."""
    out = np.empty_like(x)
    from_init = x >= xi
    if np.any(from_init):
        out[from_init] = np.interp(x[from_init] - xi, h.rho0_x, h.rho0_v)
    rest = ~from_init
    if np.any(rest):
        hx = h.hist_xi
        hv = h.hist_in
        if extra_xi is not None:
            hx = hx + [extra_xi]
            hv = hv + [extra_in]
        eta = xi - x[rest]
        if eta.min() < hx[0] - 1e-12:
            raise NumericalError("boundary trace history does not cover the lookup window")
        out[rest] = np.interp(eta, hx, hv)
    return out


def init_characteristic(f: DensityField, cfg: ClosedLoopConfig) -> BoundaryTraceHistory:
    px, pv = _initial_profile_points(f)
    W = total_mass(f)
    lam = _speed(W, cfg)
    rho_out = pv[-1]
    h = BoundaryTraceHistory(t=f.t, xi=0.0, W=W, rho0_x=px, rho0_v=pv)
    h.hist_t.append(f.t)
    h.hist_xi.append(0.0)
    h.hist_out.append(rho_out)
    h.hist_W.append(W)
    h.hist_in.append(float(_inflow_density(rho_out, W, lam, cfg)))
    return h


def characteristic_outflux(h: BoundaryTraceHistory, cfg: ClosedLoopConfig) -> tuple[float, float, float]:
    """``(lam, u, y)`` at the history's current time."""
    lam = _speed(h.W, cfg)
    rho_out = h.hist_out[-1]
    return lam, float(h.hist_in[-1] * lam), float(rho_out * lam)


def step_characteristic(h: BoundaryTraceHistory, f: DensityField, cfg: ClosedLoopConfig,
                        t_stop: Optional[float] = None, tol: float = 1e-12,
                        max_iter: int = 50, max_halvings: int = 5):
    """Advance the characteristic solver by one step.

    Returns the updated history and the field (point values at cell centres)
    at the new time.
    """
    lam0 = _speed(h.W, cfg)
    dt = cfg.cfl * f.dx / lam0
    if t_stop is not None:
        dt = min(dt, t_stop - h.t)
        if dt <= 0.0:
            raise ModelError("t_stop is not ahead of the history time")
    x = f.x
    x_out = np.array([1.0])
    for _ in range(max_halvings + 1):
        W_new = h.W
        converged = False
        for _ in range(max_iter):
            lam1 = _speed(W_new, cfg)
            xi_new = h.xi + 0.5 * dt * (lam0 + lam1)
            rho_out = float(_eval_characteristic(h, xi_new, x_out)[0])
            rho_in = float(_inflow_density(rho_out, W_new, lam1, cfg))
            cells = _eval_characteristic(h, xi_new, x, xi_new, rho_in)
            W_next = float(cells.sum() * f.dx)
            if abs(W_next - W_new) < tol:
                W_new = W_next
                converged = True
                break
            W_new = W_next
        if converged:
            break
        dt *= 0.5
        log.debug("fixed point stalled at t=%g; halving dt to %g", h.t, dt)
    else:
        raise NumericalError(f"characteristic fixed point failed at t={h.t:g}")

    # final consistent evaluation at the converged W
    lam1 = _speed(W_new, cfg)
    xi_new = h.xi + 0.5 * dt * (lam0 + lam1)
    rho_out = float(_eval_characteristic(h, xi_new, x_out)[0])
    rho_in = float(_inflow_density(rho_out, W_new, lam1, cfg))
    cells = _eval_characteristic(h, xi_new, x, xi_new, rho_in)

    h.t = h.t + dt
    h.xi = xi_new
    h.W = W_new
    h.hist_t.append(h.t)
    h.hist_xi.append(xi_new)
    h.hist_out.append(rho_out)
    h.hist_W.append(W_new)
    h.hist_in.append(rho_in)
    h.prune()
    return h, DensityField(h.t, cells)


# -- driver ----------------------------------------------------------------


def simulate(cfg: ClosedLoopConfig, rho0: DensityField, method: str = "upwind") -> TrajectoryRecord:
    """Integrate from ``rho0`` to ``cfg.t_final`` and record every ``cfg.record_every`` steps.

    The last step is shortened so the final record sits exactly at ``t_final``.
    """
    if rho0.n != cfg.n_cells:
        raise ModelError(f"initial field has {rho0.n} cells, config expects {cfg.n_cells}")
    if method not in ("upwind", "characteristic"):
        raise ModelError(f"unknown method {method!r}")

    rb = cfg.rho_bar
    rec: dict[str, list] = {key: [] for key in ("t", "W", "u", "y", "l1", "l2", "linf", "lam", "xi")}
    snaps: list[np.ndarray] = []
    dx = cfg.dx
    linf0 = float(np.max(np.abs(rho0.cells - rb)))
    ext_t = ext_xi = None

    def record(fld: DensityField, lam: float, u: float, y: float, xi: float):
        dev = fld.cells - rb
        rec["t"].append(fld.t)
        rec["W"].append(total_mass(fld))
        rec["u"].append(u)
        rec["y"].append(y)
        rec["l1"].append(float(np.abs(dev).sum() * dx))
        rec["l2"].append(float(np.sqrt((dev * dev).sum() * dx)))
        rec["linf"].append(float(np.abs(dev).max()))
        rec["lam"].append(lam)
        rec["xi"].append(xi)
        if cfg.store_snapshots:
            snaps.append(fld.cells.copy())

    f = DensityField(rho0.t, rho0.cells.copy())
    t_end = rho0.t + cfg.t_final
    xi = 0.0
    if method == "upwind":
        lam, u, y = boundary_fluxes(f, cfg)
    else:
        h = init_characteristic(f, cfg)
        lam, u, y = characteristic_outflux(h, cfg)
    record(f, lam, u, y, xi)

    step = 0
    while f.t < t_end - 1e-14 * max(1.0, t_end):
        if method == "upwind":
            t_old = f.t
            f = step_upwind(f, cfg, t_stop=t_end)
            xi += lam * (f.t - t_old)
            lam, u, y = boundary_fluxes(f, cfg)
        else:
            h, f = step_characteristic(h, f, cfg, t_stop=t_end)
            xi = h.xi
            lam, u, y = characteristic_outflux(h, cfg)
        step += 1
        linf = float(np.max(np.abs(f.cells - rb)))
        if not np.isfinite(linf) or linf > BLOWUP_LIMIT:
            raise BlowUpError(f"solution blew up at t={f.t:g} (Linf deviation {linf:g})")
        if ext_t is None and linf0 > 0.0 and linf <= EXTINCTION_RATIO * linf0:
            ext_t, ext_xi = f.t, xi
        final = f.t >= t_end - 1e-14 * max(1.0, t_end)
        if step % cfg.record_every == 0 or final:
            record(f, lam, u, y, xi)

    arr = {key: np.asarray(v, dtype=float) for key, v in rec.items()}
    return TrajectoryRecord(
        cfg=cfg, method=method, times=arr["t"], W=arr["W"], u=arr["u"], y=arr["y"],
        l1_norm=arr["l1"], l2_norm=arr["l2"], linf_norm=arr["linf"], speed=arr["lam"],
        displacement=arr["xi"], snapshots=np.array(snaps) if cfg.store_snapshots else None,
        extinction_time=ext_t, extinction_displacement=ext_xi, n_steps=step,
    )


# -- weak formulation --------------------------------------------------------


def weak_residual(traj: TrajectoryRecord, phi: Callable, phi_t: Callable, phi_x: Callable,
                  tau: Optional[float] = None, check_tol: float = 1e-12) -> float:
    """Absolute residual of the space-time weak identity for test function ``phi``.

    ``phi`` must vanish at ``t = tau`` and on ``x = 1``. Integrals use the
    cell midpoints in space and the trapezoidal rule over recorded times, so the
    trajectory should be recorded densely (``record_every = 1``).
    """
    if traj.snapshots is None:
        raise ModelError("weak_residual needs stored snapshots")
    cfg = traj.cfg
    t = traj.times
    if tau is None:
        tau = float(t[-1])
    if tau > t[-1] + 1e-12 or tau <= t[0]:
        raise ModelError("tau must lie inside the recorded time span")
    probe_x = np.linspace(0.0, 1.0, 33)
    probe_t = np.linspace(t[0], tau, 33)
    if np.max(np.abs(phi(np.full_like(probe_x, tau), probe_x))) > check_tol:
        raise ModelError("test function must vanish at t = tau")
    if np.max(np.abs(phi(probe_t, np.ones_like(probe_t)))) > check_tol:
        raise ModelError("test function must vanish on x = 1")

    sel = t <= tau + 1e-14
    ts = t[sel]
    n = traj.snapshots.shape[1]
    x = cell_centers(n)
    dx = 1.0 / n
    rho = traj.snapshots[sel]
    lam = traj.speed[sel]
    T, X = np.meshgrid(ts, x, indexing="ij")
    integrand = (rho * (phi_t(T, X) + lam[:, None] * phi_x(T, X))).sum(axis=1) * dx
    if cfg.freeze_velocity:
        influx = traj.u[sel]
    else:
        influx = cfg.k * traj.y[sel] + (1.0 - cfg.k) * cfg.flux_bar
    boundary = traj.y[sel] * phi(ts, np.ones_like(ts)) - influx * phi(ts, np.zeros_like(ts))
    initial = float((rho[0] * phi(np.full(n, ts[0]), x)).sum() * dx)
    return float(abs(-trapezoid(integrand, ts) - initial + trapezoid(boundary, ts)))


# -- export ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(traj: TrajectoryRecord, path) -> Path:
    path = Path(path)
    rows = ["t,W,u,y,l1,l2"]
    for i in range(len(traj)):
        rows.append(",".join(_fmt(v) for v in (traj.times[i], traj.W[i], traj.u[i], traj.y[i],
                                               traj.l1_norm[i], traj.l2_norm[i])))
    _write(path, rows)
    return path


def _write(path: Path, rows: list[str]):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def write_snapshot_csv(f: DensityField, path) -> Path:
    path = Path(path)
    rows = ["x,rho"] + [f"{_fmt(x)},{_fmt(r)}" for x, r in zip(f.x, f.cells)]
    _write(path, rows)
    return path


def write_snapshots(traj: TrajectoryRecord, directory, stride: int = 1) -> list[Path]:
    """One ``snapshot_<index>.csv`` per recorded time (zero-padded index)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if traj.snapshots is None:
        return []
    width = max(5, len(str(len(traj))))
    paths = []
    for i in range(0, len(traj), stride):
        paths.append(write_snapshot_csv(traj.field(i), directory / f"snapshot_{i:0{width}d}.csv"))
    if (len(traj) - 1) % stride:
        i = len(traj) - 1
        paths.append(write_snapshot_csv(traj.field(i), directory / f"snapshot_{i:0{width}d}.csv"))
    return paths


def read_snapshot_csv(path, t: float = 0.0) -> DensityField:
    """Re-ingest a ``x,rho`` snapshot as cell data."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "x,rho":
            raise ModelError(f"{path}: expected header 'x,rho'")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return DensityField(t, data[:, 1])
