"""
Position MSE against array size at the default parameters.

    python3 scripts/array_sweep.py --trials 2000 --out runs/array_sweep
"""
import argparse
import time
from pathlib import Path

from oapsense.config import config_from_pairs
from oapsense.experiment import run_sweep
from oapsense.outputs import emit_outputs


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="runs/array_sweep")
    args = ap.parse_args()

    pairs = dict(kv.split("=", 1) for kv in args.set)
    pairs.update({"run.trials": str(args.trials), "run.seed": str(args.seed)})
    cfg = config_from_pairs(pairs)
    t0 = time.perf_counter()
    rep = run_sweep(cfg, progress=lambda s: print(
        f"N={s.array_n:4d}  mse={s.mse_m2:10.4g} m^2  miss={s.miss_rate:.3f}  "
        f"false={s.false_peak_rate:.3f}  failures={s.failures}", flush=True))
    emit_outputs(rep, cfg, Path(args.out), trials_csv=False)
    print(f"wrote {args.out} in {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
