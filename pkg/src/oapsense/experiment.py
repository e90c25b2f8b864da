"""
Monte Carlo harness: scene -> render -> detect -> assign -> invert -> score.

Every trial owns two random streams derived from ``(seed, trial)``, one for
the scene and one for rendering, so the same scenes are reused across array
sizes and results do not depend on worker scheduling.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detect
from .assign import AssignmentResult, euclidean_cost, mahalanobis_cost, solve_lap_rect
from .config import ExperimentConfig
from .detect import CalibrationModel, SpotSet
from .errors import FitError
from .geom import default_gate, flag_anomalies, ground_estimates
from .io import truth_rows, write_frame, write_truth_csv
from .sensor import Frame, generate_scene, render_frame

log = logging.getLogger(__name__)


def trial_streams(seed: int, trial: int, salt: int = 0):
    ss = np.random.SeedSequence(seed, spawn_key=(salt, trial))
    scene_ss, render_ss = ss.spawn(2)
    return np.random.default_rng(scene_ss), np.random.default_rng(render_ss)


# ---------------------------------------------------------------------------
# single frame


def detect_spots(frame: Frame, cfg: ExperimentConfig, n_true: int | None,
                 calibration: CalibrationModel | None = None) -> SpotSet:
    dcfg = cfg.detector_config(known_count=n_true)
    hm = detect.matched_filter_heatmap(frame, dcfg)
    if dcfg.known_count is not None and cfg.detector.pad == "pursuit":
        spots = detect.nms_peaks(hm, replace(dcfg, known_count=None))
        if len(spots) > dcfg.known_count:
            spots = SpotSet(spots.centroids[: dcfg.known_count], spots.scores[: dcfg.known_count])
        elif len(spots) < dcfg.known_count:
            spots = detect.pursue_missing(frame, spots, dcfg.known_count, cfg.sigma_eff, dcfg)
    else:
        spots = detect.nms_peaks(hm, dcfg)
    refine = cfg.detector.refine
    if refine == "centroid" and len(spots):
        # never smaller than the 3x3 neighbourhood, diagonals included
        window = max(dcfg.refine_window, math.hypot(frame.sensor.pitch_dx, frame.sensor.pitch_dy))
        spots = detect.refine_subpixel(frame, spots, window)
    elif refine == "psf_fit" and len(spots):
        spots = detect.fit_spots(frame, spots, cfg.sigma_eff)
    if calibration is not None:
        spots = detect.apply_calibration(calibration, spots)
    return spots


def match_to_truth(truth_pts, est_pts, cfg: ExperimentConfig, energies=None) -> AssignmentResult:
    """Assign sensor-plane estimates to true sensor points, gated at ``cfg.c_max``."""
    truth_pts = np.asarray(truth_pts).reshape(-1, 2)
    est_pts = np.asarray(est_pts).reshape(-1, 2)
    if cfg.assign.metric == "euclidean":
        return solve_lap_rect(euclidean_cost(truth_pts, est_pts), cfg.c_max)
    s2 = cfg.sigma_eff**2
    if cfg.assign.covariance == "snr" and energies is not None and len(energies):
        e = np.maximum(np.asarray(energies, dtype=float), 1e-300)
        scale = e.mean() / e
    else:
        scale = np.ones(len(truth_pts))
    cov = s2 * scale[:, None, None] * np.eye(2)
    return solve_lap_rect(mahalanobis_cost(truth_pts, est_pts, cov), cfg.c_max / cfg.sigma_eff)


@dataclass
class TrialResult:
    trial: int
    array_n: int
    n_tx: int
    n_eve: int
    truth_ground: np.ndarray
    est_ground: np.ndarray
    truth_sensor: np.ndarray
    est_sensor: np.ndarray
    raw_sensor: np.ndarray
    is_eve: np.ndarray
    claims: list
    pairs: list
    sq_errors: np.ndarray
    misses: int
    false_peaks: int
    elapsed_s: float
    error: str | None = None
    flagged: list = field(default_factory=list)
    matched_claims: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error is not None


def simulate_frame(cfg: ExperimentConfig, array_n: int, trial: int, salt: int = 0):
    """Scene and rendered frame for one trial index."""
    scene_rng, render_rng = trial_streams(cfg.run.seed, trial, salt)
    scene = generate_scene(scene_rng, cfg.scene_config())
    frame = render_frame(scene, cfg.lens, cfg.sensor_config(array_n), cfg.acq, render_rng,
                         turbulence=cfg.turbulence_or_none,
                         metadata={"seed": cfg.run.seed, "scene_id": trial})
    return scene, frame


def export_dataset(count: int, cfg: ExperimentConfig, seed: int | None, out_dir) -> Path:
    """Write ``count`` frames as OWFR files plus one ``truth.csv``.

    Frame ``k`` is the scene of sweep trial ``k`` rendered at
    ``sensor.nx x sensor.ny``.
    """
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    if seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(count):
        scene_rng, render_rng = trial_streams(cfg.run.seed, k, 0)
        scene = generate_scene(scene_rng, cfg.scene_config())
        frame = render_frame(scene, cfg.lens, cfg.sensor_config(), cfg.acq, render_rng,
                             turbulence=cfg.turbulence_or_none)
        write_frame(out / f"frame_{k:06d}.owfr", frame.pixels)
        rows.extend(truth_rows(k, scene))
    write_truth_csv(out / "truth.csv", rows)
    return out


def run_trial(cfg: ExperimentConfig, array_n: int, trial: int,
              calibration: CalibrationModel | None = None, salt: int = 0,
              keep_frame: bool = False):
    """One full pipeline pass. Exceptions are captured in the result, never raised."""
    t0 = time.perf_counter()
    try:
        scene, frame = simulate_frame(cfg, array_n, trial, salt)
        sensor = frame.sensor
        n = len(scene.transmitters)
        raw = detect_spots(frame, cfg, n, None)
        spots = detect.apply_calibration(calibration, raw) if calibration is not None else raw
        truth_sensor = frame.metadata["truth_points"]
        res = match_to_truth(truth_sensor, spots.centroids, cfg, frame.metadata["energies"])
        ests = ground_estimates(spots.centroids, sensor.plane_z, scene.uav_altitude_hu)
        est_ground = np.array([e.position for e in ests]).reshape(-1, 2)
        truth_ground = scene.true_positions()
        if res.pairs:
            i, j = np.array(res.pairs).T
            sq = np.sum((truth_ground[i] - est_ground[j]) ** 2, axis=1)
        else:
            sq = np.zeros(0)
        out = TrialResult(
            trial=trial, array_n=array_n, n_tx=n, n_eve=scene.n_eavesdroppers,
            truth_ground=truth_ground, est_ground=est_ground,
            truth_sensor=truth_sensor, est_sensor=spots.centroids, raw_sensor=raw.centroids,
            is_eve=np.array([not t.legitimate for t in scene.transmitters]),
            claims=scene.claims(), pairs=res.pairs, sq_errors=sq,
            misses=len(res.unassigned_refs), false_peaks=len(res.unassigned_dets),
            elapsed_s=time.perf_counter() - t0,
        )
        if keep_frame:
            return out, frame
        return out
    except Exception as exc:  # isolate per-trial failures
        log.warning("trial %d (array %d) failed: %r", trial, array_n, exc)
        out = TrialResult(trial, array_n, 0, 0, *(np.zeros((0, 2)),) * 5, np.zeros(0, bool), [],
                          [], np.zeros(0), 0, 0, time.perf_counter() - t0, error=repr(exc))
        return (out, None) if keep_frame else out


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SizeSummary:
    array_n: int
    trials: int
    failures: int
    mse_m2: float
    miss_rate: float
    false_peak_rate: float
    anomaly_precision: float
    anomaly_recall: float
    runtime_ms: float
    gate_m: float
    per_n: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    sizes: list[SizeSummary]
    trials: list[TrialResult]

    @property
    def failures(self) -> int:
        return sum(s.failures for s in self.sizes)

    def summary(self, n: int) -> SizeSummary:
        return next(s for s in self.sizes if s.array_n == n)


def _pooled_mse(results) -> float:
    sq = [r.sq_errors for r in results if not r.failed]
    total = np.concatenate(sq) if sq else np.zeros(0)
    return float(np.mean(total)) if len(total) else math.nan


def score_anomalies(results: list[TrialResult], gate: float) -> tuple[float, float]:
    """Flag estimates per trial; returns (precision, recall) pooled over trials.

    An estimate counts as an eavesdropper detection when the truth
    assignment pairs it with an eavesdropper. Vacuous ratios are 1.
    """
    tp = flagged_total = eve_total = 0
    for r in results:
        if r.failed:
            continue
        eve_total += int(r.is_eve.sum())
        if len(r.est_ground) == 0:
            r.flagged, r.matched_claims = [], []
            continue
        rep = flag_anomalies(r.est_ground, r.claims, gate)
        r.flagged = rep.flagged
        r.matched_claims = [e.matched_claim for e in rep.estimates]
        est_is_eve = np.zeros(len(r.est_ground), dtype=bool)
        for i, j in r.pairs:
            est_is_eve[j] = r.is_eve[i]
        flagged_total += len(rep.flagged)
        tp += int(est_is_eve[rep.flagged].sum()) if rep.flagged else 0
    precision = tp / flagged_total if flagged_total else 1.0
    recall = tp / eve_total if eve_total else 1.0
    return precision, recall


def summarize(cfg: ExperimentConfig, array_n: int, results: list[TrialResult]) -> SizeSummary:
    ok = [r for r in results if not r.failed]
    mse = _pooled_mse(ok)
    gate = cfg.anomaly.gate if cfg.anomaly.gate is not None else default_gate(mse)
    precision, recall = score_anomalies(ok, gate)
    n_tx = sum(r.n_tx for r in ok)
    n_det = sum(len(r.est_ground) for r in ok)
    per_n = {}
    for n in sorted({r.n_tx for r in ok}):
        sub = [r for r in ok if r.n_tx == n]
        per_n[n] = {"trials": len(sub), "mse_m2": _pooled_mse(sub)}
    return SizeSummary(
        array_n=array_n,
        trials=len(results),
        failures=len(results) - len(ok),
        mse_m2=mse,
        miss_rate=sum(r.misses for r in ok) / n_tx if n_tx else 0.0,
        false_peak_rate=sum(r.false_peaks for r in ok) / n_det if n_det else 0.0,
        anomaly_precision=precision,
        anomaly_recall=recall,
        runtime_ms=1e3 * float(np.mean([r.elapsed_s for r in results])) if results else 0.0,
        gate_m=gate,
        per_n=per_n,
    )


def _run_one(args):
    cfg, n, trial, calibration = args
    return run_trial(cfg, n, trial, calibration)


def run_trials(cfg: ExperimentConfig, array_n: int, calibration=None) -> list[TrialResult]:
    jobs = [(cfg, array_n, t, calibration) for t in range(cfg.run.trials)]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(cfg.run.workers) as pool:
            # map() yields in submission order, so aggregation is order-stable
            return list(pool.map(_run_one, jobs, chunksize=16))
    return [_run_one(j) for j in jobs]


def run_sweep(cfg: ExperimentConfig, calibration: CalibrationModel | None = None,
              progress=None) -> ExperimentReport:
    sizes, trials = [], []
    for n in cfg.run.array_sizes:
        results = run_trials(cfg, n, calibration)
        summary = summarize(cfg, n, results)
        sizes.append(summary)
        trials.extend(results)
        if progress is not None:
            progress(summary)
    return ExperimentReport(sizes, trials)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationReport:
    model: CalibrationModel
    n_train_pairs: int
    mse_uncalibrated_m2: float
    mse_calibrated_m2: float


def _training_pairs(results: list[TrialResult]):
    raw, true = [], []
    for r in results:
        if r.failed:
            continue
        for i, j in r.pairs:
            raw.append(r.raw_sensor[j])
            true.append(r.truth_sensor[i])
    return np.array(raw).reshape(-1, 2), np.array(true).reshape(-1, 2)


def run_calibration(cfg: ExperimentConfig, training_frames: int | None = None,
                    heldout_frames: int | None = None, array_n: int | None = None) -> CalibrationReport:
    """Fit a calibration on simulated frames and compare on held-out frames.

    Training and held-out frames come from disjoint random streams. The
    cubic model is kept only if it wins cross-validation on the training set.
    """
    count = cfg.run.calibration_frames if training_frames is None else training_frames
    if count < 100:
        raise FitError(f"calibration needs at least 100 training frames, got {count}")
    heldout = max(count // 2, 50) if heldout_frames is None else heldout_frames
    n = cfg.sensor.nx if array_n is None else array_n
    train = [run_trial(cfg, n, t, None, salt=1) for t in range(count)]
    raw, true = _training_pairs(train)
    try:
        model = detect.select_calibration(raw, true)
    except FitError as exc:
        raise FitError(f"calibration fit failed on {len(raw)} pairs: {exc}") from exc
    test_raw = [run_trial(cfg, n, t, None, salt=2) for t in range(heldout)]
    test_cal = [run_trial(cfg, n, t, model, salt=2) for t in range(heldout)]
    return CalibrationReport(model, len(raw), _pooled_mse(test_raw), _pooled_mse(test_cal))
