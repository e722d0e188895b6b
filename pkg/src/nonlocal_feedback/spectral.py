"""Spectrum of the linearised closed loop.

Eigenvalues ``mu`` (in units where ``lam(rho_bar) = 1``) are the zeros of the
entire function

    f(mu) = 1 - k exp(-mu) + d (1 - k) (1 - exp(-mu)) / mu,   f(0) = (1 + d)(1 - k).

Roots are counted with the argument principle on rectangles, isolated by
recursive bisection and polished with Newton's method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

TAYLOR_RADIUS = 1e-3
DERIV_SERIES_RADIUS = 0.1
STABLE_MARGIN = 1e-6


class SpectralError(RuntimeError):
    pass


class ContourError(SpectralError):
    """A root sits on (or too near) the integration contour."""


# -- the characteristic function -------------------------------------------------


def _phi1_taylor(m):
    return 1.0 + m * (-0.5 + m * (1.0 / 6.0 + m * (-1.0 / 24.0 + m / 120.0)))


def _phi1_direct(m):
    return -np.expm1(-m) / m


def _phi1(mu):
    """``(1 - exp(-mu)) / mu`` with a Taylor branch near the removable singularity."""
    mu = np.asarray(mu, dtype=complex)
    out = np.empty_like(mu)
    small = np.abs(mu) < TAYLOR_RADIUS
    out[small] = _phi1_taylor(mu[small])
    out[~small] = _phi1_direct(mu[~small])
    return out


# Taylor coefficients of d/dmu (1 - exp(-mu)) / mu: (-1)^n n / (n+1)! mu^(n-1)
_DPHI_COEFFS = [(-1) ** n * n / math.factorial(n + 1) for n in range(1, 16)]


def _dphi1(mu):
    mu = np.asarray(mu, dtype=complex)
    out = np.empty_like(mu)
    small = np.abs(mu) < DERIV_SERIES_RADIUS
    m = mu[small]
    acc = np.zeros_like(m)
    for c in reversed(_DPHI_COEFFS):
        acc = acc * m + c
    out[small] = acc
    big = ~small
    mb = mu[big]
    e = np.exp(-mb)
    out[big] = (e * (1.0 + mb) - 1.0) / (mb * mb)
    return out


def char_fn(mu, d: float, k: float):
    """Characteristic function ``f_{d,k}(mu)``; scalar in, scalar out."""
    arr = np.asarray(mu, dtype=complex)
    val = 1.0 - k * np.exp(-arr) + d * (1.0 - k) * _phi1(arr)
    return complex(val) if np.ndim(mu) == 0 else val


def char_fn_deriv(mu, d: float, k: float):
    arr = np.asarray(mu, dtype=complex)
    val = k * np.exp(-arr) + d * (1.0 - k) * _dphi1(arr)
    return complex(val) if np.ndim(mu) == 0 else val


# -- argument principle ----------------------------------------------------------

Window = tuple  # (re_min, re_max, im_min, im_max)


def _contour_vertices(w: Window):
    a, b, c, e = w
    return [complex(a, c), complex(b, c), complex(b, e), complex(a, e)]


def _edge_samples(z0: complex, z1: complex, n: int):
    s = np.linspace(0.0, 1.0, n + 1)
    return z0 + (z1 - z0) * s


def _resolve_edge(z0, z1, d, k, base: int, max_points: int):
    """Sample an edge finely enough that the phase of f moves < pi/16 per step."""
    n = base
    while True:
        z = _edge_samples(z0, z1, n)
        fz = char_fn(z, d, k)
        dphase = np.abs(np.angle(fz[1:] / fz[:-1]))
        if dphase.max() < np.pi / 16 or n >= max_points:
            return z, fz
        n *= 2


@dataclass
class ContourIntegral:
    winding_raw: complex
    winding: int
    first_moment: complex
    min_abs_f: float
    points: int


def _contour_integral(w: Window, d: float, k: float, base: int = 64,
                      max_points: int = 1 << 17) -> ContourIntegral:
    """Trapezoidal integrals of f'/f and mu f'/f around the rectangle (counter-clockwise)."""
    verts = _contour_vertices(w)
    per_len = base / max(abs(verts[1] - verts[0]), abs(verts[2] - verts[1]))
    scale = 1
    while True:
        total = 0j
        moment = 0j
        min_f = np.inf
        npts = 0
        for i in range(4):
            z0, z1 = verts[i], verts[(i + 1) % 4]
            n0 = max(16, int(np.ceil(abs(z1 - z0) * per_len))) * scale
            z, fz = _resolve_edge(z0, z1, d, k, n0, max_points)
            g = char_fn_deriv(z, d, k) / fz
            dz = (z1 - z0) / (z.size - 1)
            tw = np.ones(z.size)
            tw[0] = tw[-1] = 0.5
            total += dz * np.sum(tw * g)
            moment += dz * np.sum(tw * z * g)
            min_f = min(min_f, float(np.abs(fz).min()))
            npts += z.size
        raw = total / (2j * np.pi)
        nearest = int(round(raw.real))
        if abs(raw - nearest) < 1e-3 or npts > 4 * max_points:
            break
        scale *= 2
    if abs(raw - nearest) >= 1e-3:
        raise SpectralError(f"winding number did not settle near an integer: {raw}")
    return ContourIntegral(raw, nearest, moment / (2j * np.pi), min_f, npts)


def _inflate(w: Window, eps: float) -> Window:
    return (w[0] - eps, w[1] + eps, w[2] - eps, w[3] + eps)


def _contour_clear(w: Window, d: float, k: float, n: int = 400) -> float:
    verts = _contour_vertices(w)
    pts = np.concatenate([_edge_samples(verts[i], verts[(i + 1) % 4], n) for i in range(4)])
    return float(np.abs(char_fn(pts, d, k)).min())


def _count(w: Window, d: float, k: float, retries: int = 3) -> tuple[ContourIntegral, Window]:
    for _ in range(retries + 1):
        if _contour_clear(w, d, k) > 1e-10:
            try:
                return _contour_integral(w, d, k), w
            except SpectralError:
                pass
        w = _inflate(w, 1e-6)
    raise ContourError(f"contour of window {w} passes through a root")


def count_roots(window: Sequence[float], d: float, k: float) -> int:
    """Number of zeros of ``f_{d,k}`` inside ``[re_min, re_max] x [im_min, im_max]``."""
    w = tuple(float(v) for v in window)
    if not (w[0] < w[1] and w[2] < w[3]):
        raise ValueError(f"degenerate window {window}")
    return _count(w, d, k)[0].winding


# -- root isolation --------------------------------------------------------------


@dataclass
class RootSet:
    window: tuple
    roots: np.ndarray
    residuals: np.ndarray
    winding_total: int
    converged: np.ndarray
    low_confidence: bool = False

    def __len__(self):
        return self.roots.size

    @property
    def max_real(self) -> float:
        return float(self.roots.real.max()) if self.roots.size else -np.inf


def _inside(mu: complex, w: Window, pad: float = 1e-9) -> bool:
    return (w[0] - pad <= mu.real <= w[1] + pad) and (w[2] - pad <= mu.imag <= w[3] + pad)


def newton_refine(mu0: complex, d: float, k: float, tol: float = 1e-12, max_iter: int = 100):
    """Newton iteration on f; returns ``(root, |f(root)|, converged)``."""
    mu = complex(mu0)
    res = abs(char_fn(mu, d, k))
    for _ in range(max_iter):
        if res < tol:
            return mu, res, True
        fp = char_fn_deriv(mu, d, k)
        if fp == 0 or not np.isfinite(fp):
            break
        mu = mu - char_fn(mu, d, k) / fp
        if not np.isfinite(mu):
            break
        res = abs(char_fn(mu, d, k))
    return mu, res, res < tol


def _split(w: Window, d: float, k: float):
    """Halve the window across its longer side, nudging the cut off any root."""
    long_re = (w[1] - w[0]) >= (w[3] - w[2])
    for frac in (0.5 + 0.0137, 0.5 - 0.0219, 0.5 + 0.0411, 0.5 - 0.0623, 0.5 + 0.1):
        if long_re:
            cut = w[0] + frac * (w[1] - w[0])
            a, b = (w[0], cut, w[2], w[3]), (cut, w[1], w[2], w[3])
            line = cut + 1j * np.linspace(w[2], w[3], 401)
        else:
            cut = w[2] + frac * (w[3] - w[2])
            a, b = (w[0], w[1], w[2], cut), (w[0], w[1], cut, w[3])
            line = np.linspace(w[0], w[1], 401) + 1j * cut
        if np.abs(char_fn(line, d, k)).min() > 1e-8:
            return a, b
    return a, b


def _isolated_root(ci: ContourIntegral, w: Window, d: float, k: float, rng: np.random.Generator):
    # the first moment of f'/f is the root itself when exactly one root is enclosed
    seeds = [ci.first_moment, complex(0.5 * (w[0] + w[1]), 0.5 * (w[2] + w[3]))]
    seeds += [complex(rng.uniform(w[0], w[1]), rng.uniform(w[2], w[3])) for _ in range(5)]
    for s in seeds:
        mu, res, ok = newton_refine(s, d, k)
        if ok and _inside(mu, w, pad=1e-7 * (1 + abs(mu))):
            return mu, res, True
    return complex(ci.first_moment), abs(char_fn(ci.first_moment, d, k)), False


def find_roots(window: Sequence[float], d: float, k: float, min_size: float = 1e-10,
               seed: int = 0) -> RootSet:
    """All zeros of ``f_{d,k}`` in a rectangle, certified by the argument principle."""
    w0 = tuple(float(v) for v in window)
    rng = np.random.default_rng(seed)
    ci, w0 = _count(w0, d, k)
    total = ci.winding
    roots, res, conv = [], [], []
    low_conf = False
    stack = [(w0, ci)]
    while stack:
        w, ci = stack.pop()
        n = ci.winding
        if n <= 0:
            if n < 0:
                low_conf = True
            continue
        if n == 1:
            mu, r, ok = _isolated_root(ci, w, d, k, rng)
            roots.append(mu)
            res.append(r)
            conv.append(ok)
            continue
        if max(w[1] - w[0], w[3] - w[2]) < min_size:
            # multiple root (or cluster) below resolution
            mu, r, ok = newton_refine(ci.first_moment / n, d, k)
            roots.extend([mu] * n)
            res.extend([r] * n)
            conv.extend([False] * n)
            low_conf = True
            continue
        a, b = _split(w, d, k)
        ca, a = _count(a, d, k)
        cb, b = _count(b, d, k)
        if ca.winding + cb.winding != n:
            log.warning("sub-window counts %d + %d != %d in %s", ca.winding, cb.winding, n, w)
            low_conf = True
        stack.append((a, ca))
        stack.append((b, cb))

    roots_arr = np.array(roots, dtype=complex)
    order = np.lexsort((roots_arr.real, roots_arr.imag)) if roots_arr.size else np.array([], int)
    conv_arr = np.array(conv, dtype=bool)[order] if conv else np.zeros(0, bool)
    if not np.all(conv_arr):
        low_conf = True
    return RootSet(
        window=w0,
        roots=roots_arr[order],
        residuals=np.array(res, dtype=float)[order] if res else np.zeros(0),
        winding_total=total,
        converged=conv_arr,
        low_confidence=low_conf or len(roots) != total,
    )


# -- special case k = -1 ---------------------------------------------------------


def g_imag_axis(b, d: float):
    """``g(b) = b sin b / (2 (cos b - 1)) - d``; zeros give roots ``mu = i b`` of f_{d,-1}."""
    b = np.asarray(b, dtype=float)
    return -0.5 * b / np.tan(0.5 * b) - d


def imag_axis_roots_k_minus1(d: float, n_max: int, eps: float = 1e-9, tol: float = 1e-12) -> np.ndarray:
    """Purely imaginary eigenvalues ``i b`` at ``k = -1``, one per interval (2n pi, 2(n+1) pi).

    Intervals where the sign condition fails are reported as NaN.
    """
    if d <= -1:
        raise ValueError("requires d > -1")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    out = np.full(n_max, np.nan)
    for n in range(1, n_max + 1):
        lo, hi = 2 * n * np.pi + eps, 2 * (n + 1) * np.pi - eps
        glo, ghi = float(g_imag_axis(lo, d)), float(g_imag_axis(hi, d))
        if np.sign(glo) == np.sign(ghi):
            log.warning("no sign change of g on interval n=%d (d=%g)", n, d)
            continue
        # bisect down to adjacent floats
        while hi - lo > 2 * np.spacing(hi):
            mid = 0.5 * (lo + hi)
            gm = float(g_imag_axis(mid, d))
            if gm == 0.0:
                lo = hi = mid
                break
            if np.sign(gm) == np.sign(glo):
                lo, glo = mid, gm
            else:
                hi = mid
        mid = 0.5 * (lo + hi)
        if abs(float(g_imag_axis(mid, d))) > tol:
            log.info("bisection floor on interval n=%d: |g|=%.2e", n, abs(g_imag_axis(mid, d)))
        out[n - 1] = mid
    return out


# -- abscissa and classification -----------------------------------------------------


@dataclass
class AbscissaEstimate:
    d: float
    k: float
    s_est: float
    asymptote: float
    roots_used: Optional[RootSet] = None
    degenerate: bool = False
    low_confidence: bool = False
    time_scale: float = 1.0

    @property
    def physical_rate(self) -> float:
        return self.s_est * self.time_scale


@dataclass(frozen=True)
class SpectralProblem:
    d: float
    k: float
    time_scale: float = 1.0

    def __post_init__(self):
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")


def abscissa_window(k: float, n_modes: int) -> tuple:
    """Search rectangle for the spectral abscissa.

    Half-height ``2 pi (n_modes + 1) + pi / 2`` keeps the horizontal edges
    midway between the root rows at ``2 n pi`` and ``(2 n + 1) pi``.
    """
    R = max(3.0, abs(math.log(abs(k))) + 2.0) if k != 0 else 3.0
    H = 2 * np.pi * (n_modes + 1) + 0.5 * np.pi
    return (-R, R, -H, H)


def spectral_abscissa(d: float, k: float, n_modes: int = 8, time_scale: float = 1.0,
                      degenerate_tol: float = 1e-12) -> AbscissaEstimate:
    """Estimate ``sup Re mu`` over the spectrum.

    Finitely many roots in a bounded window are combined with the asymptote
    ``ln |k|`` along which high-frequency roots accumulate.
    """
    asym = math.log(abs(k)) if k != 0 else -math.inf
    if abs(k - 1.0) < degenerate_tol or abs(d + 1.0) < degenerate_tol:
        return AbscissaEstimate(d, k, 0.0, asym, None, degenerate=True, time_scale=time_scale)
    rs = find_roots(abscissa_window(k, n_modes), d, k)
    s = max(rs.max_real, asym)
    return AbscissaEstimate(d, k, s, asym, rs, low_confidence=rs.low_confidence, time_scale=time_scale)


@dataclass(frozen=True)
class StabilityVerdict:
    d: float
    k: float
    stable: bool
    by_theorem: bool
    s_est: float
    degenerate: bool = False
    low_confidence: bool = False


def stability_predicate(d: float, k: float) -> bool:
    return d > -1.0 and abs(k) < 1.0


def classify_stability(d: float, k: float, n_modes: int = 8) -> StabilityVerdict:
    est = spectral_abscissa(d, k, n_modes)
    return StabilityVerdict(d, k, est.s_est < -STABLE_MARGIN, stability_predicate(d, k), est.s_est,
                            est.degenerate, est.low_confidence)


# -- export ------------------------------------------------------------------------


def write_roots_csv(rs: RootSet, path):
    lines = ["re,im,residual"]
    for mu, r in zip(rs.roots, rs.residuals):
        lines.append(f"{mu.real:.17g},{mu.imag:.17g},{r:.17g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
