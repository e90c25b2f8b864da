"""
From a frame to an unordered set of sensor-plane spot centroids.

The heatmap stage is a matched filter against the known Gaussian PSF,
followed by non-maximum suppression, sub-pixel refinement, optional joint
PSF fitting of overlapping spots, and a polynomial calibration map.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from .errors import ConfigError, FitError
from .sensor import Frame, SensorConfig, spot_profile


@dataclass(frozen=True)
class DetectorConfig:
    sigma_tgt: float = 8e-3
    nms_radius: float = 16e-3
    peak_threshold: float = 0.25
    known_count: int | None = None
    # Sub-pixel window; None means 3 * sigma_tgt.
    window_radius: float | None = None

    def __post_init__(self):
        if not self.sigma_tgt > 0:
            raise ConfigError("sigma_tgt must be positive", key="detector.sigma_tgt")
        if not self.nms_radius > 0:
            raise ConfigError("nms_radius must be positive", key="detector.nms_radius")
        if not 0 < self.peak_threshold < 1:
            raise ConfigError("peak_threshold must lie in (0, 1)", key="detector.peak_threshold")
        if self.known_count is not None and self.known_count < 0:
            raise ConfigError("known_count must be >= 0", key="detector.known_count")
        if self.window_radius is not None and not self.window_radius > 0:
            raise ConfigError("window_radius must be positive", key="detector.window_radius")

    @classmethod
    def for_sigma(cls, sigma_eff: float, **kw) -> "DetectorConfig":
        """Defaults tied to the optical blur: target std = sigma, NMS radius = 2 sigma."""
        kw.setdefault("sigma_tgt", sigma_eff)
        kw.setdefault("nms_radius", 2.0 * sigma_eff)
        return cls(**kw)

    @property
    def refine_window(self) -> float:
        return 3.0 * self.sigma_tgt if self.window_radius is None else self.window_radius


@dataclass
class Heatmap:
    values: np.ndarray
    grid: SensorConfig


@dataclass
class SpotSet:
    centroids: np.ndarray
    scores: np.ndarray
    covariances: np.ndarray | None = None
    # Per-spot flags set by refinement (window off-sensor, etc.).
    flags: list[str] = field(default_factory=list)
    shortfall: bool = False

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if len(self.scores) != len(self.centroids):
            raise ValueError("one score per centroid required")
        if not self.flags:
            self.flags = [""] * len(self.centroids)

    def __len__(self):
        return len(self.centroids)

    @classmethod
    def empty(cls) -> "SpotSet":
        return cls(np.zeros((0, 2)), np.zeros(0))


# ---------------------------------------------------------------------------
# heatmaps


def _pixel_grid(grid: SensorConfig):
    return np.meshgrid(grid.x_centers, grid.y_centers)


def build_target_heatmap(centroids, cfg: DetectorConfig, grid: SensorConfig) -> Heatmap:
    """Clipped superposition of isotropic Gaussians evaluated at pixel centres."""
    pts = centroids.centroids if isinstance(centroids, SpotSet) else np.asarray(centroids)
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    X, Y = _pixel_grid(grid)
    acc = np.zeros_like(X)
    # Sorting makes the floating-point sum independent of input order.
    for x0, y0 in sorted(map(tuple, pts)):
        acc += np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / (2 * cfg.sigma_tgt**2))
    return Heatmap(np.minimum(acc, 1.0), grid)


def matched_filter_heatmap(frame: Frame, cfg: DetectorConfig) -> Heatmap:
    """Correlate the frame with the target Gaussian, subtract the median, scale to [0, 1]."""
    g = frame.sensor
    sig = (cfg.sigma_tgt / g.pitch_dy, cfg.sigma_tgt / g.pitch_dx)
    corr = ndimage.gaussian_filter(frame.pixels, sigma=sig, mode="constant", cval=0.0, truncate=4.0)
    corr = corr - np.median(corr)
    np.clip(corr, 0.0, None, out=corr)
    peak = corr.max()
    if peak > 0:
        corr /= peak
    return Heatmap(corr, g)


# ---------------------------------------------------------------------------
# peaks


def local_maxima(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive 8-connected local maxima as (rows, cols, scores).

    A flat plateau of equal maxima (e.g. a clipped heatmap) counts once, at
    the mean position of its pixels, so rows and cols may be fractional.
    """
    mx = ndimage.maximum_filter(values, size=3, mode="constant", cval=-np.inf)
    mask = (values >= mx) & (values > 0)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    idx = np.arange(1, n + 1)
    centers = np.array(ndimage.center_of_mass(mask, labels, idx)).reshape(-1, 2)
    scores = np.asarray(ndimage.maximum(values, labels, idx), dtype=float)
    return centers[:, 0], centers[:, 1], scores


def nms_peaks(heatmap: Heatmap, cfg: DetectorConfig) -> SpotSet:
    g = heatmap.grid
    rows, cols, scores = local_maxima(heatmap.values)
    if len(rows) == 0:
        return SpotSet(np.zeros((0, 2)), np.zeros(0), shortfall=bool(cfg.known_count))
    # Stable sort on (-score, row, col) for reproducible tie order.
    order = np.lexsort((cols, rows, -scores))
    pts = np.column_stack([
        g.origin_xmin + (cols[order] + 0.5) * g.pitch_dx,
        g.origin_ymin + (rows[order] + 0.5) * g.pitch_dy,
    ])
    scores = scores[order]

    kept = []
    r2 = cfg.nms_radius**2
    for k in range(len(pts)):
        if all(np.sum((pts[k] - pts[j]) ** 2) >= r2 for j in kept):
            kept.append(k)

    top = scores[kept[0]]
    sel = [k for k in kept if scores[k] >= cfg.peak_threshold * top]
    shortfall = False
    if cfg.known_count is not None:
        sel = sel[: cfg.known_count]
        if len(sel) < cfg.known_count:
            # pad with the next-best remaining maxima, suppressed or not
            rest = sorted(set(range(len(pts))) - set(sel))
            sel = sel + rest[: cfg.known_count - len(sel)]
            shortfall = len(sel) < cfg.known_count
    return SpotSet(pts[sel], scores[sel], shortfall=shortfall)


def estimate_count(heatmap: Heatmap, cfg: DetectorConfig) -> int:
    return len(nms_peaks(heatmap, replace(cfg, known_count=None)))


def refine_subpixel(frame: Frame, peaks: SpotSet, window_radius: float) -> SpotSet:
    """Intensity-weighted centre of mass inside a circular window around each peak.

    The frame median is subtracted and negatives clamped to zero before
    weighting. A window with no positive mass returns its centre.
    """
    g = frame.sensor
    if window_radius < min(g.pitch_dx, g.pitch_dy):
        raise ConfigError("refinement window must span at least one pixel pitch")
    X, Y = _pixel_grid(g)
    w = np.clip(frame.pixels - np.median(frame.pixels), 0.0, None)
    out = peaks.centroids.copy()
    flags = list(peaks.flags)
    for k, (x0, y0) in enumerate(peaks.centroids):
        mask = (X - x0) ** 2 + (Y - y0) ** 2 <= window_radius**2
        if not mask.any():
            flags[k] = "window_off_sensor"
            continue
        m = w[mask].sum()
        if m > 0:
            out[k] = (np.sum(w[mask] * X[mask]) / m, np.sum(w[mask] * Y[mask]) / m)
        else:
            out[k] = (x0, y0)
    return SpotSet(out, peaks.scores, peaks.covariances, flags, peaks.shortfall)


def pursue_missing(frame: Frame, spots: SpotSet, n_target: int, sigma: float,
                   cfg: DetectorConfig) -> SpotSet:
    """Grow ``spots`` to ``n_target`` peaks by matched-filtering the fit residual.

    Each round fits unconstrained amplitudes of the current spots by linear
    least squares, subtracts the model, and adds the residual correlation
    maximum. Recovers sources hidden under a brighter neighbour, which plain
    NMS can only pad with unrelated maxima.
    """
    g = frame.sensor
    pts = [tuple(p) for p in spots.centroids]
    scores = list(spots.scores)
    sig = (cfg.sigma_tgt / g.pitch_dy, cfg.sigma_tgt / g.pitch_dx)
    y = frame.pixels.ravel()
    ref = ndimage.gaussian_filter(frame.pixels, sig, mode="constant").max()
    while len(pts) < n_target:
        if pts:
            A = np.column_stack([spot_profile(p, sigma, g).ravel() for p in pts])
            amp, *_ = np.linalg.lstsq(A, y, rcond=None)
            resid = (y - A @ amp).reshape(g.ny, g.nx)
        else:
            resid = frame.pixels
        corr = ndimage.gaussian_filter(resid, sig, mode="constant")
        r, c = np.unravel_index(int(np.argmax(corr)), corr.shape)
        pts.append((g.x_centers[c], g.y_centers[r]))
        scores.append(float(np.clip(corr[r, c] / ref, 0.0, 1.0)) if ref > 0 else 0.0)
    return SpotSet(np.array(pts), np.array(scores), None, list(spots.flags) + ["pursued"] * (
        len(pts) - len(spots)), False)


# ---------------------------------------------------------------------------
# joint PSF fit


def fit_spots(frame: Frame, init: SpotSet, sigma: float, max_nfev: int = 200) -> SpotSet:
    """Least-squares fit of ``len(init)`` Gaussian spots of known width to the frame.

    Amplitudes are solved linearly inside each residual evaluation (variable
    projection), so only the 2N centre coordinates are iterated. Centres are
    bounded to the sensor.
    """
    n = len(init)
    if n == 0:
        return init
    g = frame.sensor
    y = frame.pixels.ravel()
    lo = np.tile([g.origin_xmin, g.origin_ymin], n)
    hi = np.tile([g.origin_xmin + g.width, g.origin_ymin + g.height], n)

    def design(theta):
        pts = theta.reshape(n, 2)
        return np.column_stack([spot_profile(p, sigma, g, cutoff=None).ravel() for p in pts])

    def residual(theta):
        A = design(theta)
        amp, *_ = np.linalg.lstsq(A, y, rcond=None)
        return A @ amp - y

    x0 = np.clip(init.centroids.ravel(), lo, hi)
    res = optimize.least_squares(residual, x0, bounds=(lo, hi), method="trf", max_nfev=max_nfev)
    pts = res.x.reshape(n, 2)
    return SpotSet(pts, init.scores, init.covariances, list(init.flags), init.shortfall)


# ---------------------------------------------------------------------------
# calibration

TERMS = ("1", "x", "y", "x2", "xy", "y2", "x3", "x2y", "xy2", "y3")
_POWERS = {
    "1": (0, 0),
    "x": (1, 0),
    "y": (0, 1),
    "x2": (2, 0),
    "xy": (1, 1),
    "y2": (0, 2),
    "x3": (3, 0),
    "x2y": (2, 1),
    "xy2": (1, 2),
    "y3": (0, 3),
}


@dataclass
class CalibrationModel:
    """Per-axis cubic polynomial mapping raw centroids to corrected ones (metres)."""

    coef_x: np.ndarray
    coef_y: np.ndarray
    residual_rms: float = 0.0
    n_samples: int = 0

    @classmethod
    def identity(cls) -> "CalibrationModel":
        cx = np.zeros(len(TERMS))
        cy = np.zeros(len(TERMS))
        cx[TERMS.index("x")] = 1.0
        cy[TERMS.index("y")] = 1.0
        return cls(cx, cy)

    def predict(self, pts) -> np.ndarray:
        F = _features(np.asarray(pts, dtype=float).reshape(-1, 2))
        return np.column_stack([F @ self.coef_x, F @ self.coef_y])

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["term", "coef_x", "coef_y"])
            for t, a, b in zip(TERMS, self.coef_x, self.coef_y):
                w.writerow([t, repr(float(a)), repr(float(b))])

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        coefs = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                coefs[row["term"]] = (float(row["coef_x"]), float(row["coef_y"]))
        missing = set(TERMS) - set(coefs)
        if missing:
            raise ConfigError(f"calibration file {Path(path)} lacks terms {sorted(missing)}")
        return cls(np.array([coefs[t][0] for t in TERMS]), np.array([coefs[t][1] for t in TERMS]))


def _features(uv: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    return np.column_stack([u ** _POWERS[t][0] * v ** _POWERS[t][1] for t in TERMS])


def fit_calibration(raw, true) -> CalibrationModel:
    """Least-squares cubic fit of true sensor points on raw centroids."""
    raw = np.asarray(raw, dtype=float).reshape(-1, 2)
    true = np.asarray(true, dtype=float).reshape(-1, 2)
    if len(raw) != len(true):
        raise FitError("raw and true point lists differ in length")
    if len(raw) < 10 * len(TERMS):
        raise FitError(f"need at least {10 * len(TERMS)} samples, got {len(raw)}")
    # Fit in normalised coordinates, then fold the scale back into the coefficients.
    scale = float(np.max(np.abs(raw))) or 1.0
    F = _features(raw / scale)
    rank = np.linalg.matrix_rank(F)
    if rank < F.shape[1]:
        raise FitError(f"calibration design is rank deficient ({rank} < {F.shape[1]})")
    coef, *_ = np.linalg.lstsq(F, true, rcond=None)
    rms = float(math.sqrt(np.mean(np.sum((F @ coef - true) ** 2, axis=1))))
    degree = np.array([sum(_POWERS[t]) for t in TERMS], dtype=float)
    coef = coef / scale ** degree[:, None]
    return CalibrationModel(coef[:, 0], coef[:, 1], rms, len(raw))


def select_calibration(raw, true, folds: int = 5) -> CalibrationModel:
    """Cubic fit if it beats the identity map under k-fold cross-validation, else identity."""
    raw = np.asarray(raw, dtype=float).reshape(-1, 2)
    true = np.asarray(true, dtype=float).reshape(-1, 2)
    full = fit_calibration(raw, true)
    parts = np.array_split(np.arange(len(raw)), folds)
    err_fit = err_id = 0.0
    try:
        for test in parts:
            m = fit_calibration(np.delete(raw, test, axis=0), np.delete(true, test, axis=0))
            err_fit += float(np.sum((m.predict(raw[test]) - true[test]) ** 2))
            err_id += float(np.sum((raw[test] - true[test]) ** 2))
    except FitError:
        err_fit = math.inf
    if err_fit < err_id:
        return full
    ident = CalibrationModel.identity()
    rms = float(math.sqrt(np.mean(np.sum((raw - true) ** 2, axis=1))))
    return CalibrationModel(ident.coef_x, ident.coef_y, rms, len(raw))


def apply_calibration(model: CalibrationModel, spots: SpotSet) -> SpotSet:
    if len(spots) == 0:
        return spots
    return SpotSet(
        model.predict(spots.centroids), spots.scores, spots.covariances, list(spots.flags),
        spots.shortfall,
    )
