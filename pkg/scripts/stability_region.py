"""Map the stability region on a (d, k) grid and compare with the predicate d > -1, |k| < 1."""

import argparse
from pathlib import Path

from nonlocal_feedback.experiments import RegionScanSpec, region_scan, write_region_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/region")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--step", type=float, default=None, help="override both grid steps")
    ap.add_argument("--simulate", action="store_true", help="also fit frozen-velocity decay rates")
    args = ap.parse_args()

    kw = {"simulate": args.simulate}
    if args.step:
        kw.update(d_step=args.step, k_step=args.step)
    spec = RegionScanSpec(**kw)
    rows = region_scan(spec, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_region_csv(rows, out / "region.csv", with_alpha=args.simulate)
    bad = [r for r in rows if r["mismatch"]]
    print(f"{len(rows)} points, {len(bad)} mismatches, {sum(r['stable'] for r in rows)} stable")
    for r in bad:
        print(f"  mismatch at d={r['d']:+.2f} k={r['k']:+.2f} s_est={r['s_est']:.3e}")


if __name__ == "__main__":
    main()
