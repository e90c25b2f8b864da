"""
Files written by the experiment runner.

Everything here is a deterministic function of the report: no timestamps,
fixed float formatting, and SVGs rendered with a fixed hash salt and no
date metadata.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, serialize_config
from .io import write_frame

SWEEP_HEADER = [
    "array_n", "trials", "mse_m2", "miss_rate", "false_peak_rate",
    "anomaly_precision", "anomaly_recall", "runtime_ms",
]
ANOMALY_HEADER = ["trial", "est_x_m", "est_y_m", "matched_claim_id", "anomaly"]
OVERLAY_HEADER = ["marker", "x_true_px", "y_true_px", "x_est_px", "y_est_px", "dist_px"]


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(round(float(v), 10))


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    return path


def write_sweep_csv(path, report, timing: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SWEEP_HEADER)
        for s in report.sizes:
            w.writerow([
                s.array_n, s.trials, _num(s.mse_m2), _num(s.miss_rate), _num(s.false_peak_rate),
                _num(s.anomaly_precision), _num(s.anomaly_recall),
                _num(s.runtime_ms if timing else 0.0),
            ])


def write_per_n_csv(path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["array_n", "n_tx", "trials", "mse_m2"])
        for s in report.sizes:
            for n, row in s.per_n.items():
                w.writerow([s.array_n, n, row["trials"], _num(row["mse_m2"])])


def write_trials_csv(path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["array_n", "trial", "n_tx", "n_eve", "matched", "mse_m2", "misses",
                    "false_peaks", "flagged", "failed"])
        for r in report.trials:
            mse = float(np.mean(r.sq_errors)) if len(r.sq_errors) else math.nan
            w.writerow([r.array_n, r.trial, r.n_tx, r.n_eve, len(r.pairs), _num(mse), r.misses,
                        r.false_peaks, len(r.flagged), int(r.failed)])


def write_anomaly_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ANOMALY_HEADER)
        for r in results:
            for k, (x, y) in enumerate(r.est_ground):
                claim = r.matched_claims[k] if k < len(r.matched_claims) else None
                w.writerow([r.trial, _num(x), _num(y), "" if claim is None else claim,
                            int(k in r.flagged)])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "oapsense"
    return plt


def plot_mse(path, report) -> None:
    plt = _pyplot()
    sizes = [s.array_n for s in report.sizes]
    mse = [s.mse_m2 for s in report.sizes]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(sizes, mse, "o-")
    ax.set_xlabel("array side N (N x N pixels)")
    ax.set_ylabel("position MSE (m$^2$)")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def to_pixels(points, sensor) -> np.ndarray:
    """Sensor-plane metres to fractional pixel coordinates (pixel centres at integers)."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.column_stack([
        (p[:, 0] - sensor.origin_xmin) / sensor.pitch_dx - 0.5,
        (p[:, 1] - sensor.origin_ymin) / sensor.pitch_dy - 0.5,
    ])


def write_overlay(stem: Path, frame, trial) -> None:
    """Heatmap of the frame with true (circle) and estimated (cross) spot positions.

    Writes ``<stem>.svg`` and ``<stem>.csv``; the CSV pairs each truth with
    its assigned estimate in pixel units.
    """
    sensor = frame.sensor
    tp = to_pixels(trial.truth_sensor, sensor)
    ep = to_pixels(trial.est_sensor, sensor)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(OVERLAY_HEADER)
        for k, (i, j) in enumerate(trial.pairs):
            d = float(np.hypot(*(tp[i] - ep[j])))
            w.writerow([k, _num(tp[i, 0]), _num(tp[i, 1]), _num(ep[j, 0]), _num(ep[j, 1]), _num(d)])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(frame.pixels, origin="lower", cmap="inferno")
    ax.scatter(tp[:, 0], tp[:, 1], s=60, facecolors="none", edgecolors="lime", label="true")
    ax.scatter(ep[:, 0], ep[:, 1], s=60, marker="x", c="red", label="estimated")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("pixel x")
    ax.set_ylabel("pixel y")
    fig.tight_layout()
    fig.savefig(stem.with_suffix(".svg"), format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_outputs(report, cfg: ExperimentConfig, out_dir, trials_csv: bool = True,
                 frames: list | None = None) -> list[Path]:
    """Write the sweep artefacts into ``out_dir``; returns the written paths.

    ``frames`` is an optional list of (TrialResult, Frame) to dump as OWFR
    plus overlays.
    """
    out = _ensure_dir(Path(out_dir))
    written = []
    p = out / "sweep.csv"
    write_sweep_csv(p, report, timing=cfg.run.timing)
    written.append(p)
    p = out / "sweep_by_n.csv"
    write_per_n_csv(p, report)
    written.append(p)
    if trials_csv:
        p = out / "trials.csv"
        write_trials_csv(p, report)
        written.append(p)
    for s in report.sizes:
        p = out / f"anomalies_{s.array_n}.csv"
        write_anomaly_csv(p, [r for r in report.trials if r.array_n == s.array_n and not r.failed])
        written.append(p)
    p = out / "config.txt"
    p.write_text(serialize_config(cfg))
    written.append(p)
    p = out / "mse_vs_array.svg"
    plot_mse(p, report)
    written.append(p)
    for trial, frame in frames or []:
        stem = out / f"frame_n{trial.array_n}_t{trial.trial}"
        write_frame(stem.with_suffix(".owfr"), frame.pixels)
        write_overlay(stem.with_name(stem.name + "_overlay"), frame, trial)
        written.append(stem.with_suffix(".owfr"))
    return written
