"""Lyapunov functionals and decay-rate measurement.

All functionals act on deviation variables ``rho - rho_bar`` and
``W - rho_bar``, so one code path serves ``rho_bar = 0`` and ``rho_bar != 0``.

Spatial weights are integrated exactly over each cell (the density being
piecewise constant), so ``L`` of a constant deviation is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Union

import numpy as np

from .solver import DensityField, TrajectoryRecord


class LyapunovCaseError(ValueError):
    """Parameters outside the regime a construction covers."""


def exp_weights(n: int, beta: float) -> np.ndarray:
    """Exact cell integrals of ``exp(-beta x)`` on a uniform grid of ``n`` cells."""
    edges = np.arange(n + 1) / n
    if beta == 0.0:
        return np.diff(edges)
    return -np.diff(np.exp(-beta * edges)) / beta


# -- |d| < 1 -----------------------------------------------------------------


@dataclass(frozen=True)
class LyapunovCaseSmallD:
    """Constants of ``L = int exp(-beta x) rho^2 + a W^2``."""

    d: float
    k: float
    beta: float
    a: float
    valid: bool
    margin: float        # 1 - d^2 (e^beta - 1)^2 e^-beta / beta^2
    C1: float
    C2: float
    C3: float
    C4: float
    rate_factor: float   # beta * margin / C3

    @property
    def name(self) -> str:
        return "small-d"


def _small_d_constraints(beta: float, d: float, k: float):
    a = (math.exp(-beta) - k) * d / (1.0 - k)
    em1 = math.expm1(beta)
    c1 = a > -beta / em1
    c2 = math.exp(-beta) > k * k
    margin = 1.0 - d * d * em1 * em1 * math.exp(-beta) / (beta * beta)
    return a, c1, c2, margin


def small_d_case(d: float, k: float, beta: float, a: Optional[float] = None) -> LyapunovCaseSmallD:
    """Constants for a given ``beta``; ``a`` defaults to ``(e^-beta - k) d / (1 - k)``."""
    a_def, c1, c2, margin = _small_d_constraints(beta, d, k)
    if a is None:
        a = a_def
    else:
        c1 = a > -beta / math.expm1(beta)
    ratio = math.expm1(beta) / beta  # sup W^2 / int exp(-beta x) rho^2
    C2 = min(1.0, 1.0 + a * ratio)
    C3 = max(1.0, 1.0 + a * ratio)
    C1 = math.exp(-beta) * C2
    C4 = 1.0 + max(a, 0.0)
    valid = bool(c1 and c2 and margin > 0)
    return LyapunovCaseSmallD(d, k, beta, a, valid, margin, C1, C2, C3, C4, beta * margin / C3)


def select_beta(d: float, k: float, beta0: float = 1.0, max_halvings: int = 60) -> LyapunovCaseSmallD:
    """Halve ``beta`` from ``beta0`` until all three constraints hold."""
    if abs(d) >= 1 or abs(k) >= 1:
        raise LyapunovCaseError(f"small-d construction needs |d| < 1 and |k| < 1 (d={d}, k={k})")
    beta = beta0
    for _ in range(max_halvings):
        case = small_d_case(d, k, beta)
        if case.valid:
            return case
        beta *= 0.5
    raise LyapunovCaseError(f"no admissible beta found for d={d}, k={k}")


def select_beta_zero(k: float, beta0: float = 1.0) -> LyapunovCaseSmallD:
    """Weight for the pure weighted-L2 functional at ``rho_bar = 0`` (``a = 0``, ``e^-beta > k^2``)."""
    if abs(k) >= 1:
        raise LyapunovCaseError("needs |k| < 1")
    beta = beta0
    while not math.exp(-beta) > k * k:
        beta *= 0.5
    return small_d_case(0.0, k, beta, a=0.0)


def lyap_L(f: DensityField, rho_bar: float, beta: float, a: float) -> float:
    dev = f.cells - rho_bar
    Wt = dev.sum() * f.dx
    return float(np.dot(exp_weights(f.n, beta), dev * dev) + a * Wt * Wt)


# -- d >= 1 ------------------------------------------------------------------


def xi_field(f: DensityField, rho_bar: float, d: float) -> DensityField:
    """``(rho - rho_bar) + d (W - rho_bar)`` cellwise."""
    dev = f.cells - rho_bar
    return DensityField(f.t, dev + d * dev.sum() * f.dx)


def lyap_V1(f: DensityField, rho_bar: float, d: float) -> float:
    dev = f.cells - rho_bar
    Wt = dev.sum() * f.dx
    return float((dev * dev).sum() * f.dx + d * Wt * Wt)


def lyap_V2(f: DensityField, rho_bar: float, d: float) -> float:
    xi = xi_field(f, rho_bar, d).cells
    return float(np.dot(exp_weights(f.n, 1.0), xi * xi))


def lyap_V(f: DensityField, rho_bar: float, d: float, k: float, A: float) -> float:
    if abs(k) >= 1:
        raise LyapunovCaseError("V needs |k| < 1")
    if not A > 0:
        raise LyapunovCaseError("V needs A > 0")
    return 2.0 * A / (1.0 - k * k) * lyap_V1(f, rho_bar, d) + lyap_V2(f, rho_bar, d)


def constant_A(d: float, k: float) -> float:
    """Boundary constant with ``dV2/dt <= -V2/2 + A xi(t,1)^2``.

    Young's inequality on the cross term with the Cauchy-Schwarz bound
    ``(int e^-x xi)^2 <= (1 - e^-1) V2`` gives ``A = k^2 + 2 d^2 (1-k)^2 (1 - e^-1)``;
    floored at 1e-6 so that V stays well defined when the bound vanishes.
    """
    if abs(k) >= 1:
        raise LyapunovCaseError("needs |k| < 1")
    return max(1e-6, k * k + 2.0 * d * d * (1.0 - k) ** 2 * (1.0 - math.exp(-1.0)))


@dataclass(frozen=True)
class LyapunovCaseLargeD:
    d: float
    k: float
    A: float
    B1: float
    B2: float
    B3: float
    B4: float

    @property
    def weight(self) -> float:
        return 2.0 * self.A / (1.0 - self.k ** 2)

    @property
    def name(self) -> str:
        return "large-d"


def large_d_case(d: float, k: float) -> LyapunovCaseLargeD:
    """Constants for ``V`` with the equivalence chain
    ``B1 |rho|^2 <= B2 V2 <= V <= B3 V2 <= B4 |rho|^2`` (valid for d >= 0)."""
    if abs(k) >= 1:
        raise LyapunovCaseError("needs |k| < 1")
    if d < 0:
        raise LyapunovCaseError("large-d construction needs d >= 0")
    A = constant_A(d, k)
    c = 2.0 * A / (1.0 - k * k)
    B3 = 1.0 + math.e * c * (1.0 + d)
    return LyapunovCaseLargeD(d, k, A, math.exp(-1.0), 1.0, B3, B3 * (1.0 + d) ** 2)


def choose_case(d: float, k: float):
    """Small-d construction for |d| < 1, large-d for d >= 1."""
    if abs(d) < 1:
        return select_beta(d, k)
    if d >= 1:
        return large_d_case(d, k)
    raise LyapunovCaseError(f"no Lyapunov construction for d={d} <= -1")


def evaluate(case, f: DensityField, rho_bar: float) -> float:
    if isinstance(case, LyapunovCaseSmallD):
        return lyap_L(f, rho_bar, case.beta, case.a)
    if isinstance(case, LyapunovCaseLargeD):
        return lyap_V(f, rho_bar, case.d, case.k, case.A)
    raise TypeError(f"unknown Lyapunov case {case!r}")


# -- monitoring --------------------------------------------------------------


@dataclass
class MonitorResult:
    t: np.ndarray
    values: np.ndarray
    ratio: np.ndarray          # log(F_{i+1}/F_i) / dt_i
    max_increase: float        # max_i (F_{i+1} - F_i), 0 if monotone
    case_name: str

    @property
    def relative_max_increase(self) -> float:
        F0 = self.values[0]
        return self.max_increase / F0 if F0 > 0 else (0.0 if self.max_increase <= 0 else math.inf)

    def monotone(self, rel_tol: float = 1e-9) -> bool:
        return self.max_increase <= rel_tol * self.values[0]


def monitor(traj: TrajectoryRecord, case) -> MonitorResult:
    """Evaluate a functional on every snapshot and report its monotonicity."""
    if traj.snapshots is None:
        raise ValueError("monitor needs a trajectory with snapshots")
    rb = traj.cfg.rho_bar
    vals = np.array([evaluate(case, traj.field(i), rb) for i in range(len(traj))])
    dt = np.diff(traj.times)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log(vals[1:] / vals[:-1]) / dt
    inc = np.diff(vals)
    return MonitorResult(traj.times.copy(), vals, ratio, float(max(inc.max(initial=0.0), 0.0)), case.name)


def write_monitor_csv(m: MonitorResult, path):
    lines = ["t,functional,ratio"]
    ratio = np.concatenate(([np.nan], m.ratio))
    for t, v, r in zip(m.t, m.values, ratio):
        lines.append(f"{t:.17g},{v:.17g},{r:.17g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- decay fits --------------------------------------------------------------


@dataclass
class DecayFit:
    alpha: float
    c: float
    r_squared: float
    window: tuple
    extinct: bool = False
    extinction_time: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def fit_exponential(t, values, transient: float = 0.1, t_end: Optional[float] = None) -> DecayFit:
    """Least-squares line through ``(t, log values)`` after the initial transient."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    t_end = t[-1] if t_end is None else t_end
    t_start = t[0] + transient * (t_end - t[0])
    sel = (t >= t_start) & (t <= t_end)
    ts, vs = t[sel], v[sel]
    if ts.size == 0 or np.any(vs <= 0):
        nonpos = np.nonzero(v <= 0)[0]
        t_ext = float(t[nonpos[0]]) if nonpos.size else None
        return DecayFit(math.nan, math.nan, math.nan, (float(t_start), float(t_end)), True, t_ext)
    if ts.size < 2:
        raise ValueError("need at least two samples in the fit window")
    logv = np.log(vs)
    slope, intercept = np.polyfit(ts, logv, 1)
    resid = logv - (slope * ts + intercept)
    ss_tot = float(((logv - logv.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-slope), float(math.exp(intercept)), float(min(max(r2, 0.0), 1.0)),
                    (float(ts[0]), float(ts[-1])))


_SERIES = {"l2": "l2_norm", "l1": "l1_norm", "linf": "linf_norm"}


def fit_decay_rate(traj: TrajectoryRecord, norm: Union[str, np.ndarray] = "l2",
                   transient: float = 0.1) -> DecayFit:
    """Exponential rate of a trajectory series (``l2``, ``l1``, ``linf`` or an array).

    If the run reached the extinction threshold the fit window ends at the
    extinction time and the result carries the extinction flag; the rate is
    NaN when too few positive samples precede it.
    """
    if isinstance(norm, str):
        series = getattr(traj, _SERIES[norm])
    else:
        series = np.asarray(norm, dtype=float)
    t = traj.times
    t_ext = traj.extinction_time
    if t_ext is None:
        return fit_exponential(t, series, transient)
    t_start = t[0] + transient * (t_ext - t[0])
    n_window = int(np.count_nonzero((t >= t_start) & (t <= t_ext)))
    if n_window >= 10:
        fit = fit_exponential(t, series, transient, t_end=t_ext)
        if math.isfinite(fit.alpha):
            return replace(fit, extinct=True, extinction_time=float(t_ext))
    return DecayFit(math.nan, math.nan, math.nan, (float(t_start), float(t_ext)), True, float(t_ext))


def inf_speed(velocity, R: float, samples: int = 20001) -> float:
    """``inf lam(s)`` over ``|s| <= R`` intersected with the velocity's valid range."""
    lo, hi = velocity.valid_range
    a, b = max(-R, lo), min(R, hi)
    if a > b:
        raise ValueError("empty intersection with valid range")
    s = np.linspace(a, b, samples)
    return float(np.min(velocity.lam(s)))


def weighted_cs_constant(n: int, beta: float) -> float:
    """Discrete Cauchy-Schwarz constant ``sum dx^2 / w_i`` (tends to (e^beta - 1)/beta)."""
    w = exp_weights(n, beta)
    return float(((1.0 / n) ** 2 / w).sum())

