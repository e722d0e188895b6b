"""Deviation decay at rho_bar = 1 (reciprocal speed) against the linearised rate.

Prints the measured L2 ratio at several horizons next to exp(s_est * lam_bar * T),
the decay predicted by the rightmost eigenvalue.
"""

import argparse
import math

from nonlocal_feedback.core_model import ClosedLoopConfig, VelocityModel
from nonlocal_feedback.experiments import InitialProfile
from nonlocal_feedback.lyapunov import fit_decay_rate
from nonlocal_feedback.solver import simulate
from nonlocal_feedback.spectral import spectral_abscissa


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gains", type=float, nargs="+", default=[0.0, 0.5, -0.5])
    ap.add_argument("--t-final", type=float, default=40.0)
    ap.add_argument("--shape", default="gaussian", choices=("sine", "gaussian"))
    args = ap.parse_args()
    for k in args.gains:
        cfg = ClosedLoopConfig(1.0, k, VelocityModel.reciprocal(1.0), n_cells=200, t_final=args.t_final)
        rho0 = InitialProfile(kind="perturbation", shape=args.shape, amplitude=0.05).build(cfg)
        traj = simulate(cfg, rho0)
        est = spectral_abscissa(cfg.d, k, time_scale=cfg.lambda_bar)
        fit = fit_decay_rate(traj)
        print(f"k={k:+.2f}: physical rate {-est.physical_rate:.4f}, fitted {fit.alpha:.4f} (r2 {fit.r_squared:.4f})")
        for T in (10.0, 20.0, 30.0, args.t_final):
            i = min(range(len(traj)), key=lambda j: abs(traj.times[j] - T))
            ratio = traj.l2_norm[i] / traj.l2_norm[0]
            print(f"   T={traj.times[i]:5.1f}  measured {ratio:.3e}  linear {math.exp(est.physical_rate * T):.3e}")


if __name__ == "__main__":
    main()
