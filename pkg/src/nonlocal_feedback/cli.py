"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 failed ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import spectral
from .core_model import ModelError
from .solver import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("nonlocal_feedback")


class CheckFailed(Exception):
    pass


def _require(ok: bool, msg: str):
    if not ok:
        raise CheckFailed(msg)


def _scenario(args, force: tuple = ()) -> ex.Scenario:
    s = ex.load_scenario(args.config)
    if args.method is not None:
        s.method = args.method
    extra = tuple(a for a in force if a not in s.analyses)
    s.analyses = tuple(s.analyses) + extra
    return s


def cmd_simulate(args) -> dict:
    s = _scenario(args)
    summary = ex.run_scenario(s, args.out)
    if args.check and summary["theorem_stable"] and summary["fit"] is not None:
        _require(summary["fit"]["alpha"] is not None and summary["fit"]["alpha"] > 0,
                 "fitted decay rate is not positive")
    return summary


def cmd_lyapunov(args) -> dict:
    s = _scenario(args)
    if not any(a.startswith("lyapunov") for a in s.analyses):
        from .lyapunov import choose_case
        s.analyses = tuple(s.analyses) + ("lyapunov-" + choose_case(s.cfg.d, s.cfg.k).name,)
    summary = ex.run_scenario(s, args.out)
    if args.check:
        for key in ("lyapunov-small-d", "lyapunov-large-d"):
            if key in summary:
                _require(summary[key]["monotone"], f"{key} functional increased "
                         f"(relative {summary[key]['max_relative_increase']:.3g})")
    return summary


def cmd_extinction(args) -> dict:
    s = _scenario(args, force=("extinction",))
    summary = ex.run_scenario(s, args.out)
    if args.check:
        _require(summary["extinct"], "no extinction detected")
        _require(summary["extinction_displacement"] <= 1.0 + 5.0 * summary["extinction_dx"],
                 "extinction later than one domain crossing plus 5 cells")
    return summary


_SPECTRUM_KEYS = {"d", "k", "n_modes", "window", "imag_axis_modes", "time_scale"}


def cmd_spectrum(args) -> dict:
    raw = ex.load_config(args.config)
    sec = raw.get("spectrum")
    if sec is None:
        raise ex.ConfigError("missing [spectrum] section")
    ex._check_keys(sec, _SPECTRUM_KEYS, "spectrum")
    if "d" not in sec or "k" not in sec:
        raise ex.ConfigError("[spectrum] needs d and k")
    d, k = float(sec["d"]), float(sec["k"])
    n_modes = int(sec.get("n_modes", 8))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"d": d, "k": k, "by_theorem": spectral.stability_predicate(d, k)}
    est = spectral.spectral_abscissa(d, k, n_modes, float(sec.get("time_scale", 1.0)))
    summary.update(s_est=est.s_est, asymptote=None if math.isinf(est.asymptote) else est.asymptote,
                   physical_rate=est.physical_rate, degenerate=est.degenerate,
                   low_confidence=est.low_confidence)
    rs = est.roots_used
    if "window" in sec:
        w = [float(v) for v in sec["window"]]
        if len(w) != 4:
            raise ex.ConfigError("window must be [re_min, re_max, im_min, im_max]")
        rs = spectral.find_roots(w, d, k)
        summary["window"] = w
    if rs is not None:
        spectral.write_roots_csv(rs, out / "roots.csv")
        summary.update(n_roots=len(rs.roots), winding=rs.winding_total, converged=rs.converged,
                       max_residual=max(rs.residuals, default=0.0))
    if "imag_axis_modes" in sec:
        if k != -1.0:
            raise ex.ConfigError("imag_axis_modes requires k = -1")
        b = spectral.imag_axis_roots_k_minus1(d, int(sec["imag_axis_modes"]))
        ex._write_lines(out / "imag_axis.csv", ["n,b,abs_f"] + [
            f"{n},{ex._fmt(v)},{ex._fmt(abs(spectral.char_fn(1j * v, d, k)))}"
            for n, v in enumerate(b, start=1)])
        summary["imag_axis_roots"] = [float(v) for v in b]
    with open(out / "spectrum.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=ex._json_default)
        fh.write("\n")
    if args.check and rs is not None:
        _require(bool(np.all(rs.converged)) and not rs.low_confidence, "root isolation did not converge")
        _require(len(rs.roots) == rs.winding_total, "root count disagrees with winding number")
        _require(summary["max_residual"] < 1e-9, "root residual above 1e-9")
    return summary


def cmd_region(args) -> dict:
    raw = ex.load_config(args.config)
    spec = ex.region_spec_from_dict(dict(raw.get("region", {})))
    rows = ex.region_scan(spec, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_region_csv(rows, out / "region.csv", with_alpha=spec.simulate)
    mism = [(r["d"], r["k"]) for r in rows if r["mismatch"]]
    summary = {"points": len(rows), "mismatches": len(mism), "mismatch_points": mism,
               "failed_points": sum(r["status"] != "ok" for r in rows)}
    with open(out / "region_summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.check:
        _require(not mism, f"{len(mism)} grid points disagree with the stability predicate")
    return summary


def cmd_plot_data(args) -> dict:
    files = ex.emit_plot_data(args.out)
    return {"written": [str(p) for p in files]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlfb", description="Closed-loop nonlocal conservation law lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    handlers = {
        "simulate": (cmd_simulate, "run a scenario and fit its decay rate"),
        "spectrum": (cmd_spectrum, "locate roots of the characteristic function in a window"),
        "region": (cmd_region, "classify stability on a (d, k) grid"),
        "lyapunov": (cmd_lyapunov, "monitor the Lyapunov functional along a scenario"),
        "extinction": (cmd_extinction, "check finite-time extinction of a scenario"),
    }
    for name, (fn, text) in handlers.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="TOML config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--check", action="store_true", help="exit 4 if the run's acceptance check fails")
        sp.add_argument("--threads", type=int, default=1, help="parallel workers for scans")
        if name in ("simulate", "lyapunov", "extinction"):
            sp.add_argument("--method", choices=("upwind", "characteristic"), default=None)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("plot-data", help="convert CSV artifacts in --out to gnuplot .dat files")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_data, check=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        log.error("--threads must be >= 1")
        return EXIT_CONFIG
    try:
        result = args.func(args)
    except (ex.ConfigError, ModelError, FileNotFoundError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ex.ScenarioError as exc:
        if isinstance(exc.cause, (ex.ConfigError, ModelError, FileNotFoundError)):
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (NumericalError, spectral.SpectralError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except CheckFailed as exc:
        log.error("check failed: %s", exc)
        return EXIT_CHECK
    print(json.dumps(result, sort_keys=True, default=ex._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
