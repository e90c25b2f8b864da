"""Inverse lens geometry, ground-position error metrics, and anomaly flagging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .assign import AssignmentResult, euclidean_cost, solve_lap_rect
from .errors import DomainError

GATE_FLOOR_M = 2.0


@dataclass
class GroundEstimate:
    position: tuple[float, float]
    source_centroid: tuple[float, float] | None = None
    angles: tuple[float, float] | None = None
    matched_claim: int | None = None
    anomaly: bool = False


@dataclass
class AnomalyReport:
    estimates: list[GroundEstimate]
    missing_claims: list[int] = field(default_factory=list)

    @property
    def flagged(self) -> list[int]:
        return [k for k, e in enumerate(self.estimates) if e.anomaly]


def invert_to_angles(centroid, z: float) -> np.ndarray:
    if not z > 0:
        raise DomainError(f"sensor distance must be positive, got {z}")
    return np.arctan(np.asarray(centroid, dtype=float) / z)


def reconstruct_ground(angles, hu: float) -> np.ndarray:
    a = np.asarray(angles, dtype=float)
    if not hu > 0:
        raise DomainError(f"altitude must be positive, got {hu}")
    if np.any(np.abs(a) >= math.pi / 2):
        raise DomainError("angles must satisfy |theta| < pi/2")
    return hu * np.tan(a)


def link_length_estimate(angles, hu: float) -> float:
    """Slant range implied by the altitude and the polar angle of the incidence direction.

    A convenience derived from the lateral inversion, not an independent
    range measurement.
    """
    tx, ty = angles
    return hu * math.sqrt(1.0 + math.tan(tx) ** 2 + math.tan(ty) ** 2)


def ground_estimates(centroids, z: float, hu: float) -> list[GroundEstimate]:
    out = []
    for c in np.asarray(centroids, dtype=float).reshape(-1, 2):
        ang = invert_to_angles(c, z)
        p = reconstruct_ground(ang, hu)
        out.append(GroundEstimate((float(p[0]), float(p[1])), tuple(map(float, c)), tuple(map(float, ang))))
    return out


def mse_position(estimates, truths, assignment: AssignmentResult) -> float:
    """Mean squared ground error over matched (truth, estimate) pairs.

    ``assignment`` indexes truths as references and estimates as detections.
    Unmatched truths are left out; NaN when nothing is matched.
    """
    if not assignment.pairs:
        return math.nan
    est = np.asarray(estimates, dtype=float).reshape(-1, 2)
    tru = np.asarray(truths, dtype=float).reshape(-1, 2)
    i, j = np.array(assignment.pairs).T
    return float(np.mean(np.sum((tru[i] - est[j]) ** 2, axis=1)))


def default_gate(mse: float) -> float:
    if not math.isfinite(mse):
        return GATE_FLOOR_M
    return max(GATE_FLOOR_M, 3.0 * math.sqrt(mse))


def flag_anomalies(estimates, claimed, gate_radius: float) -> AnomalyReport:
    """Match estimates to claimed positions; estimates left unmatched are flagged.

    ``claimed`` is a list of ``(claim_id, (x, y))``. Leaving an estimate or a
    claim unmatched costs ``gate_radius`` each.
    """
    if not gate_radius > 0:
        raise DomainError("gate radius must be positive")
    if len(estimates) and isinstance(estimates[0], GroundEstimate):
        ests = [replace(e) for e in estimates]
    else:
        ests = [GroundEstimate(tuple(map(float, p))) for p in np.asarray(estimates).reshape(-1, 2)]
    ids = [cid for cid, _ in claimed]
    pts = np.array([p for _, p in claimed], dtype=float).reshape(-1, 2)
    est_pts = np.array([e.position for e in ests], dtype=float).reshape(-1, 2)
    res = solve_lap_rect(euclidean_cost(est_pts, pts), gate_radius)
    for e in ests:
        e.matched_claim, e.anomaly = None, True
    for k, c in res.pairs:
        ests[k].matched_claim = ids[c]
        ests[k].anomaly = False
    return AnomalyReport(ests, [ids[c] for c in res.unassigned_dets])
