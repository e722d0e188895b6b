"""Compare simulated linear-regime decay rates with the spectral abscissa."""

import argparse

from nonlocal_feedback.experiments import linear_regime_config, linear_regime_initial
from nonlocal_feedback.lyapunov import fit_decay_rate
from nonlocal_feedback.solver import simulate
from nonlocal_feedback.spectral import spectral_abscissa

POINTS = [(0.0, 0.5), (-0.5, 0.3), (0.5, -0.3), (1.0, 0.2), (2.0, 0.0), (-0.8, 0.6)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-cells", type=int, default=400)
    ap.add_argument("--t-final", type=float, default=20.0)
    args = ap.parse_args()
    print(f"{'d':>6} {'k':>6} {'-s_est':>9} {'alpha':>9} {'rel.err':>8} {'r2':>7}")
    for d, k in POINTS:
        cfg = linear_regime_config(d, k, args.n_cells, args.t_final)
        fit = fit_decay_rate(simulate(cfg, linear_regime_initial(args.n_cells)))
        s = spectral_abscissa(d, k).s_est
        print(f"{d:6.2f} {k:6.2f} {-s:9.5f} {fit.alpha:9.5f} {abs(fit.alpha + s) / -s:8.2%} {fit.r_squared:7.4f}")


if __name__ == "__main__":
    main()
