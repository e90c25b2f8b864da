"""
Command line entry point: ``oapsense {simulate,sweep,calibrate,dataset}``.

Exit codes: 0 success, 2 configuration error, 3 too many failed trials.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, config_from_pairs, parse_config, serialize_config
from .detect import CalibrationModel
from .errors import ConfigError, FitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURES = 3

log = logging.getLogger("oapsense")


def _array_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes:
        raise argparse.ArgumentTypeError("no array sizes given")
    return sizes


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--metric", choices=("euclidean", "mahalanobis"))
    count = p.add_mutually_exclusive_group()
    count.add_argument("--known-count", dest="known_count", action="store_true", default=None,
                       help="detector keeps exactly as many peaks as transmitters")
    count.add_argument("--estimate-count", dest="known_count", action="store_false",
                       help="detector estimates the number of spots")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oapsense", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render and process a single scene")
    _add_common(p)
    p.add_argument("--trial", type=int, default=0, help="scene index within the seed")
    p.add_argument("--array-size", type=int, help="pixels per side (default sensor.nx)")

    p = sub.add_parser("sweep", help="Monte Carlo sweep over array sizes")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--array-sizes", type=_array_sizes)
    p.add_argument("--emit-frames", type=int, default=0, metavar="K",
                   help="dump the first K frames of every array size with overlays")
    p.add_argument("--workers", type=int)
    p.add_argument("--timing", action="store_true", default=None,
                   help="write measured runtime_ms (otherwise 0 for byte-stable output)")
    p.add_argument("--calibration", type=Path, help="calibration CSV to apply to centroids")

    p = sub.add_parser("calibrate", help="fit a polynomial centroid calibration")
    _add_common(p)
    p.add_argument("--frames", type=int, help="training frames (default run.calibration_frames)")
    p.add_argument("--array-size", type=int)

    p = sub.add_parser("dataset", help="export frames and ground truth")
    _add_common(p)
    p.add_argument("--count", type=int, default=10)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    cfg = config_from_pairs(pairs, cfg) if pairs else cfg
    run = {"mode": args.command}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["out"] = str(args.out)
    for name in ("trials", "array_sizes", "workers", "timing"):
        v = getattr(args, name, None)
        if v is not None:
            run[name] = v
    kw = {"run": dataclasses.replace(cfg.run, **run)}
    if args.metric is not None:
        kw["assign"] = dataclasses.replace(cfg.assign, metric=args.metric)
    if args.known_count is not None:
        kw["detector"] = dataclasses.replace(cfg.detector, known_count=args.known_count)
    return dataclasses.replace(cfg, **kw)


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_trial, score_anomalies, simulate_frame
    from .geom import default_gate
    from .io import truth_rows, write_frame, write_truth_csv
    from .outputs import write_anomaly_csv, write_overlay

    n = args.array_size or cfg.sensor.nx
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    res, frame = run_trial(cfg, n, args.trial, keep_frame=True)
    if res.failed:
        log.error("trial failed: %s", res.error)
        return EXIT_FAILURES
    scene, _ = simulate_frame(cfg, n, args.trial)
    gate = cfg.anomaly.gate if cfg.anomaly.gate is not None else default_gate(float("nan"))
    score_anomalies([res], gate)
    write_frame(out / "frame.owfr", frame.pixels)
    write_truth_csv(out / "truth.csv", truth_rows(args.trial, scene))
    write_anomaly_csv(out / "anomalies.csv", [res])
    write_overlay(out / "overlay", frame, res)
    (out / "config.txt").write_text(serialize_config(cfg))
    mse = float(res.sq_errors.mean()) if len(res.sq_errors) else float("nan")
    print(f"transmitters={res.n_tx} eavesdroppers={res.n_eve} matched={len(res.pairs)} "
          f"misses={res.misses} false_peaks={res.false_peaks} mse_m2={mse:.4g} "
          f"flagged={res.flagged}")
    return EXIT_OK


def _failure_exit(cfg, failures: int, total: int) -> int:
    rate = failures / total if total else 0.0
    if rate > cfg.run.max_failure_rate:
        log.error("%d of %d trials failed (%.1f%% > %.1f%%)", failures, total, 100 * rate,
                  100 * cfg.run.max_failure_rate)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_sweep, run_trial
    from .outputs import emit_outputs

    calibration = CalibrationModel.load(args.calibration) if args.calibration else None

    def progress(s):
        print(f"N={s.array_n:4d}  mse={s.mse_m2:10.4g} m^2  miss={s.miss_rate:.3f}  "
              f"false={s.false_peak_rate:.3f}  P={s.anomaly_precision:.3f}  "
              f"R={s.anomaly_recall:.3f}  failures={s.failures}", flush=True)

    report = run_sweep(cfg, calibration, progress=progress)
    frames = []
    for n in cfg.run.array_sizes:
        for t in range(min(args.emit_frames, cfg.run.trials)):
            res, frame = run_trial(cfg, n, t, calibration, keep_frame=True)
            if frame is not None and not res.failed:
                frames.append((res, frame))
    emit_outputs(report, cfg, cfg.run.out, frames=frames)
    timing = Path(cfg.run.out) / "timing.log"
    timing.write_text("".join(f"array_n={s.array_n} runtime_ms={s.runtime_ms:.3f}\n"
                              for s in report.sizes))
    return _failure_exit(cfg, report.failures, len(report.trials))


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_calibration

    rep = run_calibration(cfg, args.frames, array_n=args.array_size)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.model.save(out / "calibration.csv")
    print(f"pairs={rep.n_train_pairs} residual_rms={rep.model.residual_rms:.4g} m "
          f"heldout_mse_raw={rep.mse_uncalibrated_m2:.4g} m^2 "
          f"heldout_mse_calibrated={rep.mse_calibrated_m2:.4g} m^2")
    return EXIT_OK


def cmd_dataset(cfg: ExperimentConfig, args) -> int:
    from .experiment import export_dataset

    out = export_dataset(args.count, cfg, None, cfg.run.out)
    print(f"wrote {args.count} frames to {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "dataset": cmd_dataset,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
