"""
Position MSE against array size for several blur widths.

Shows where finer pixels stop paying off: the curve flattens once the
pitch falls well below the spot width.

    python3 scripts/sigma_trend.py --sigmas 0.0005,0.002,0.008 --trials 300
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from oapsense.config import config_from_pairs  # noqa: E402
from oapsense.experiment import run_sweep  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--sigmas", default="0.0005,0.002,0.008", help="sigma_diff0 values in metres")
    ap.add_argument("--trials", type=int, default=300)
    ap.add_argument("--refine", default="centroid", choices=["centroid", "psf_fit", "none"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sigma_trend")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for sigma in (float(s) for s in args.sigmas.split(",")):
        cfg = config_from_pairs({
            "lens.sigma_diff0": repr(sigma), "run.trials": str(args.trials),
            "run.seed": str(args.seed), "detector.refine": args.refine,
        })
        rep = run_sweep(cfg)
        ns = [s.array_n for s in rep.sizes]
        mse = [s.mse_m2 for s in rep.sizes]
        rows += [(sigma, n, m) for n, m in zip(ns, mse)]
        print(f"sigma={1e3 * sigma:.2f} mm  " + "  ".join(f"{n}:{m:.4g}" for n, m in zip(ns, mse)),
              flush=True)
        ax.semilogy(ns, mse, marker="o", label=f"{1e3 * sigma:g} mm")
    ax.set_xlabel("array size N (N x N)")
    ax.set_ylabel("position MSE (m$^2$)")
    ax.legend(title="sigma_diff0")
    fig.tight_layout()
    fig.savefig(out / "sigma_trend.svg", metadata={"Date": None})
    with open(out / "sigma_trend.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma_diff0_m", "array_n", "mse_m2"])
        w.writerows(rows)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
