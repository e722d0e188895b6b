"""Physical model: velocity laws, feedback law, equilibrium ratio, compatibility checks.

The closed loop is

    rho_t + (rho * lam(W))_x = 0,   W(t) = int_0^1 rho(t, x) dx,
    u(t) - F = k (y(t) - F),        F = rho_bar * lam(rho_bar),

with influx u = rho(t, 0) lam(W) and outflux y = rho(t, 1) lam(W).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline


class ModelError(ValueError):
    """Invalid model input (out-of-range density, bad parameter)."""


class DegenerateEquilibriumError(ModelError):
    pass


class VelocityKind(str, enum.Enum):
    RECIPROCAL = "Reciprocal"
    USER_TABULATED = "UserTabulated"
    USER_ANALYTIC = "UserAnalytic"


def _fd_derivative(fn: Callable, s):
    h = 1e-6 * np.maximum(1.0, np.abs(s))
    return (fn(s + h) - fn(s - h)) / (2.0 * h)


@dataclass(frozen=True)
class VelocityModel:
    """Speed law ``lam(s)`` with derivative, defined on a closed interval.

    Evaluation outside ``valid_range`` raises :class:`ModelError` rather than
    extrapolating.
    """

    kind: VelocityKind
    lam_fn: Callable = field(repr=False)
    lam_prime_fn: Callable = field(repr=False)
    valid_range: tuple[float, float]
    label: str = ""
    positivity_samples: int = 1001

    def __post_init__(self):
        lo, hi = self.valid_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ModelError(f"bad valid_range {self.valid_range}")
        s = np.linspace(lo, hi, self.positivity_samples)
        vals = np.asarray(self.lam_fn(s), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            bad = s[~(np.isfinite(vals) & (vals > 0))][0]
            raise ModelError(f"velocity not positive on valid_range (e.g. at s={bad:g})")

    def _check(self, s):
        lo, hi = self.valid_range
        arr = np.asarray(s, dtype=float)
        if np.any(arr < lo) or np.any(arr > hi) or not np.all(np.isfinite(arr)):
            raise ModelError(f"s={s!r} outside velocity valid_range [{lo:g}, {hi:g}]")

    def lam(self, s):
        self._check(s)
        return self.lam_fn(s)

    def lam_prime(self, s):
        self._check(s)
        return self.lam_prime_fn(s)

    __call__ = lam

    def contains(self, s: float) -> bool:
        lo, hi = self.valid_range
        return lo <= s <= hi

    # -- constructors -----------------------------------------------------

    @classmethod
    def reciprocal(cls, rho_bar: float = 0.0, valid_range: Optional[Sequence[float]] = None):
        """``lam(s) = 1/(1+s)``; default range scales with ``|rho_bar|``."""
        if valid_range is None:
            scale = 1.0 + abs(rho_bar)
            # keep 1+s bounded away from zero
            valid_range = (max(-0.5 * scale, -0.9), 10.0 * scale)
        lo, hi = map(float, valid_range)
        if lo <= -1.0:
            raise ModelError("reciprocal velocity requires s > -1")
        return cls(
            VelocityKind.RECIPROCAL,
            lambda s: 1.0 / (1.0 + s),
            lambda s: -1.0 / (1.0 + s) ** 2,
            (lo, hi),
            label="reciprocal",
        )

    @classmethod
    def exponential(cls, scale: float = 1.0, rate: float = 0.0,
                    center: float = 0.0, valid_range: Sequence[float] = (-10.0, 10.0)):
        """``lam(s) = scale * exp(rate * (s - center))``.

        With ``center = rho_bar`` and ``scale = 1`` this gives ``lam(rho_bar) = 1``
        and ``d = rho_bar * rate``, convenient for linear-regime studies.
        """
        if scale <= 0:
            raise ModelError("exponential velocity needs scale > 0")
        return cls(
            VelocityKind.USER_ANALYTIC,
            lambda s: scale * np.exp(rate * (s - center)),
            lambda s: scale * rate * np.exp(rate * (s - center)),
            tuple(map(float, valid_range)),
            label="exponential",
        )

    @classmethod
    def polynomial(cls, coefficients: Sequence[float], valid_range: Sequence[float]):
        """``lam(s) = sum_i c_i s**i`` (increasing powers)."""
        poly = np.polynomial.Polynomial(np.asarray(coefficients, dtype=float))
        dpoly = poly.deriv()
        return cls(
            VelocityKind.USER_ANALYTIC,
            lambda s: poly(s),
            lambda s: dpoly(s),
            tuple(map(float, valid_range)),
            label="polynomial",
        )

    @classmethod
    def tabulated(cls, s_values: Sequence[float], lam_values: Sequence[float]):
        """Cubic-spline interpolant of a sample table; derivative by centred differences.

        The derivative stencil may reach ``h`` past the table ends, where the
        spline's polynomial extension is used.
        """
        s_arr = np.asarray(s_values, dtype=float)
        l_arr = np.asarray(lam_values, dtype=float)
        if s_arr.ndim != 1 or s_arr.shape != l_arr.shape or s_arr.size < 4:
            raise ModelError("tabulated velocity needs >= 4 matching samples")
        order = np.argsort(s_arr)
        s_arr, l_arr = s_arr[order], l_arr[order]
        if np.any(np.diff(s_arr) <= 0):
            raise ModelError("tabulated s values must be distinct")
        spline = CubicSpline(s_arr, l_arr)
        fn = lambda s: spline(s)  # noqa: E731
        return cls(
            VelocityKind.USER_TABULATED,
            fn,
            lambda s: _fd_derivative(fn, s),
            (float(s_arr[0]), float(s_arr[-1])),
            label="tabulated",
        )

    @classmethod
    def from_csv(cls, path):
        """Read a ``s,lambda`` table with header."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["s", "lambda"]:
                raise ModelError(f"{path}: expected header 's,lambda'")
            try:
                rows = [(float(r["s"]), float(r["lambda"])) for r in reader]
            except (TypeError, ValueError) as exc:
                raise ModelError(f"{path}: {exc}") from exc
        s, lam = zip(*rows) if rows else ((), ())
        return cls.tabulated(s, lam)


def velocity_from_config(spec: dict, rho_bar: float = 0.0, base_dir: Path | None = None) -> VelocityModel:
    """Build a velocity model from a config mapping.

    Keys: ``kind`` (reciprocal | exponential | polynomial | tabulated),
    ``coefficients``, ``table``, ``valid_range``. Unknown keys are rejected.
    """
    allowed = {"kind", "coefficients", "table", "valid_range"}
    unknown = set(spec) - allowed
    if unknown:
        raise ModelError(f"unknown velocity keys: {sorted(unknown)}")
    kind = str(spec.get("kind", "reciprocal")).lower()
    vr = spec.get("valid_range")
    coeffs = spec.get("coefficients")
    if kind == "reciprocal":
        return VelocityModel.reciprocal(rho_bar, vr)
    if kind == "exponential":
        # coefficients = [scale, rate, center]
        c = list(coeffs) if coeffs is not None else [1.0, 0.0, rho_bar]
        if len(c) == 2:
            c.append(rho_bar)
        if len(c) != 3:
            raise ModelError("exponential velocity takes coefficients [scale, rate(, center)]")
        return VelocityModel.exponential(c[0], c[1], c[2], vr if vr is not None else (-10.0, 10.0))
    if kind == "polynomial":
        if coeffs is None or vr is None:
            raise ModelError("polynomial velocity requires coefficients and valid_range")
        return VelocityModel.polynomial(coeffs, vr)
    if kind == "tabulated":
        table = spec.get("table")
        if table is None:
            raise ModelError("tabulated velocity requires 'table' (CSV path)")
        path = Path(table)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ModelError(f"velocity table not found: {path}")
        return VelocityModel.from_csv(path)
    raise ModelError(f"unknown velocity kind {kind!r}")


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Equilibrium, gain, velocity law and solver parameters for one run."""

    rho_bar: float
    k: float
    velocity: VelocityModel
    n_cells: int = 200
    cfl: float = 0.9
    t_final: float = 10.0
    record_every: int = 1
    freeze_velocity: bool = False
    store_snapshots: bool = True

    def __post_init__(self):
        if not self.velocity.contains(self.rho_bar):
            raise ModelError(f"rho_bar={self.rho_bar} outside velocity valid_range {self.velocity.valid_range}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ModelError("n_cells must be an integer >= 2")
        if not (0.0 < self.cfl <= 1.0):
            raise ModelError("cfl must lie in (0, 1]")
        if not self.t_final > 0:
            raise ModelError("t_final must be positive")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ModelError("record_every must be a positive integer")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @property
    def lambda_bar(self) -> float:
        return float(self.velocity.lam(self.rho_bar))

    @property
    def flux_bar(self) -> float:
        return self.rho_bar * self.lambda_bar

    @property
    def d(self) -> float:
        return equilibrium_summary(self.rho_bar, self.velocity).d


@dataclass(frozen=True)
class EquilibriumSummary:
    rho_bar: float
    lambda_bar: float
    lambda_prime_bar: float
    d: float
    flux_bar: float


def equilibrium_summary(rho_bar: float, v: VelocityModel) -> EquilibriumSummary:
    """Equilibrium speed, flux and the ratio ``d = rho_bar lam'(rho_bar) / lam(rho_bar)``."""
    if not v.contains(rho_bar):
        raise ModelError(f"rho_bar={rho_bar} outside valid_range {v.valid_range}")
    lam = float(v.lam(rho_bar))
    if lam <= 0.0:
        raise DegenerateEquilibriumError(f"lam(rho_bar) = {lam} <= 0")
    dlam = float(v.lam_prime(rho_bar))
    return EquilibriumSummary(rho_bar, lam, dlam, rho_bar * dlam / lam, rho_bar * lam)


def feedback_influx(y, cfg: ClosedLoopConfig):
    """Influx commanded by the output feedback law for measured outflux ``y``."""
    # k*y + (1-k)*F is exact at k = 1 (u == y bitwise)
    return cfg.k * y + (1.0 - cfg.k) * cfg.flux_bar


@dataclass(frozen=True)
class CompatibilityReport:
    order0_residual: float
    order1_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.order0_residual <= self.tol and self.order1_residual <= self.tol


def check_c1_compatibility(cfg: ClosedLoopConfig, rho_0: float, rho_1: float,
                           drho_0: float, drho_1: float, mass: float,
                           tol: float = 1e-10) -> CompatibilityReport:
    """Residuals of the two C^1 compatibility conditions for initial data.

    Parameters
    ----------
    rho_0, rho_1 : values of the initial profile at x = 0 and x = 1
    drho_0, drho_1 : its derivatives at x = 0 and x = 1
    mass : integral of the profile over [0, 1]
    """
    k = cfg.k
    lam_m = float(cfg.velocity.lam(mass))
    dlam_m = float(cfg.velocity.lam_prime(mass))
    r0 = lam_m * (rho_0 - k * rho_1) - (1.0 - k) * cfg.flux_bar
    r1 = lam_m * (drho_0 - k * drho_1) - dlam_m * (rho_0 - rho_1) * (rho_0 - k * rho_1)
    return CompatibilityReport(abs(r0), abs(r1), tol)


def check_profile_compatibility(cfg: ClosedLoopConfig, rho0: Callable[[float], float],
                                drho0: Callable[[float], float], tol: float = 1e-10) -> CompatibilityReport:
    """Convenience wrapper taking the profile and its derivative as callables."""
    from scipy.integrate import quad

    mass, _ = quad(rho0, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return check_c1_compatibility(cfg, rho0(0.0), rho0(1.0), drho0(0.0), drho0(1.0), mass, tol)
