"""Largest perturbation amplitude for which the Lyapunov functional still decays monotonically.

This is an empirical estimate of the local basin, not a certified bound.
"""

import argparse

import numpy as np

from nonlocal_feedback.experiments import perturbation_size_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rho-bar", type=float, default=1.0)
    ap.add_argument("--k", type=float, default=0.5)
    ap.add_argument("--shape", default="gaussian", choices=("sine", "gaussian", "random"))
    ap.add_argument("--max-amplitude", type=float, default=1.5)
    ap.add_argument("--levels", type=int, default=12)
    args = ap.parse_args()
    amps = np.geomspace(0.01, args.max_amplitude, args.levels)
    rows = perturbation_size_scan(args.rho_bar, args.k, amps, shape=args.shape)
    best = None
    for r in rows:
        print(f"amplitude {r['amplitude']:.4f}  monotone={r['monotone']!s:5}  alpha={r['alpha']:.4f}  {r['status']}")
        if r["monotone"] and r["status"] == "ok":
            best = r["amplitude"]
    print(f"largest monotone amplitude tested: {best}")


if __name__ == "__main__":
    main()
