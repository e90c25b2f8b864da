"""
Linear assignment between reference points and detections.

``solve_lap`` is a shortest-augmenting-path Hungarian method with row/column
potentials, O(n^3). Among equal-cost optima it returns the lexicographically
smallest pairing, found by walking the tight-edge subgraph of the optimal
duals. ``solve_lap_rect`` handles spurious and missed detections with dummy
nodes priced at ``c_max``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# Reduced costs within this fraction of the largest cost count as tight.
TIE_RTOL = 1e-12


@dataclass
class CostMatrix:
    values: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise DomainError("costs must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AssignmentResult:
    pairs: list[tuple[int, int]]
    unassigned_refs: list[int] = field(default_factory=list)
    unassigned_dets: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    def validate(self, n_ref: int, n_det: int) -> None:
        refs = [i for i, _ in self.pairs] + list(self.unassigned_refs)
        dets = [j for _, j in self.pairs] + list(self.unassigned_dets)
        if sorted(refs) != list(range(n_ref)) or sorted(dets) != list(range(n_det)):
            raise AssertionError(f"not a partial matching over {n_ref}x{n_det}: {self}")

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


# ---------------------------------------------------------------------------
# costs


def _points(p):
    return np.asarray(p, dtype=float).reshape(-1, 2)


def euclidean_cost(refs, dets) -> CostMatrix:
    r, d = _points(refs), _points(dets)
    diff = r[:, None, :] - d[None, :, :]
    return CostMatrix(np.sqrt(np.sum(diff**2, axis=-1)), "euclidean")


def mahalanobis_cost(refs, dets, covariances) -> CostMatrix:
    """Distance under each reference's inverse covariance ``Sigma_i``."""
    r, d = _points(refs), _points(dets)
    cov = np.asarray(covariances, dtype=float)
    if cov.shape == (2, 2):
        cov = np.broadcast_to(cov, (len(r), 2, 2))
    if cov.shape != (len(r), 2, 2):
        raise ValueError(f"need one 2x2 covariance per reference, got shape {cov.shape}")
    out = np.empty((len(r), len(d)))
    for i, S in enumerate(cov):
        if not np.allclose(S, S.T):
            raise DomainError(f"covariance {i} is not symmetric")
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise DomainError(f"covariance {i} is not positive definite") from None
        # ||L^-1 (r - d)||^2 = (r - d)^T S^-1 (r - d)
        w = np.linalg.solve(L, (r[i] - d).T)
        out[i] = np.sqrt(np.sum(w**2, axis=0))
    return CostMatrix(out, "mahalanobis")


# ---------------------------------------------------------------------------
# square LAP


def _hungarian(C: np.ndarray):
    """Min-cost perfect matching of a square matrix.

    Returns (col_of_row, u, v) with optimal duals satisfying
    C[i, j] - u[i] - v[j] >= 0, tight on the matching.
    """
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # p[j]: row matched to column j (1-based; 0 = free)
    p = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = C[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    # p[0] holds the last processed row's bookkeeping; duals are u[1:], v[1:]
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols_free: set[int]) -> bool:
    """Kuhn's augmenting-path bipartite matching restricted to ``rows`` x ``cols_free``."""
    match_col: dict[int, int] = {}

    def try_row(i, seen):
        for j in adj[i]:
            if j in cols_free and j not in seen:
                seen.add(j)
                if j not in match_col or try_row(match_col[j], seen):
                    match_col[j] = i
                    return True
        return False

    return all(try_row(i, set()) for i in rows)


def _lexicographic_tight(C: np.ndarray, u, v, fallback) -> np.ndarray:
    n = C.shape[0]
    tol = TIE_RTOL * max(1.0, float(np.max(np.abs(C))))
    reduced = C - u[:, None] - v[None, :]
    adj = [list(np.nonzero(reduced[i] <= tol)[0]) for i in range(n)]
    if all(len(a) == 1 for a in adj):
        return fallback
    chosen = np.empty(n, dtype=int)
    free = set(range(n))
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, list(range(i + 1, n)), free):
                chosen[i] = j
                break
            free.add(j)
        else:  # tolerance inconsistency; keep the solver's own answer
            return fallback
    return chosen


def solve_lap(cost) -> AssignmentResult:
    """Globally optimal one-to-one assignment for a square cost matrix."""
    C = cost.values if isinstance(cost, CostMatrix) else CostMatrix(cost).values
    n, m = C.shape
    if n != m:
        raise ValueError(f"solve_lap needs a square matrix, got {n}x{m}; use solve_lap_rect")
    if n == 0:
        return AssignmentResult([], [], [], 0.0)
    cols, u, v = _hungarian(C)
    cols = _lexicographic_tight(C, u, v, cols)
    pairs = [(i, int(j)) for i, j in enumerate(cols)]
    total = float(sum(C[i, j] for i, j in pairs))
    return AssignmentResult(pairs, [], [], total)


def solve_lap_rect(cost, penalty_cmax: float) -> AssignmentResult:
    """Assignment with dummy nodes: leaving a reference or a detection unmatched costs ``c_max``.

    The n_ref x n_det problem is embedded in a square matrix of side
    n_ref + n_det: real-to-dummy entries cost ``c_max``, dummy-to-dummy 0.
    """
    if not penalty_cmax > 0:
        raise DomainError("penalty_cmax must be positive")
    C = cost.values if isinstance(cost, CostMatrix) else CostMatrix(cost).values
    n_ref, n_det = C.shape
    size = n_ref + n_det
    if size == 0:
        return AssignmentResult([], [], [], 0.0)
    big = np.zeros((size, size))
    big[:n_ref, :n_det] = C
    big[:n_ref, n_det:] = penalty_cmax
    big[n_ref:, :n_det] = penalty_cmax
    res = solve_lap(big)
    pairs, un_ref, matched_dets = [], [], set()
    for i, j in res.pairs:
        if i < n_ref and j < n_det:
            pairs.append((i, j))
            matched_dets.add(j)
        elif i < n_ref:
            un_ref.append(i)
    un_det = [j for j in range(n_det) if j not in matched_dets]
    total = float(sum(C[i, j] for i, j in pairs)) + penalty_cmax * (len(un_ref) + len(un_det))
    return AssignmentResult(pairs, un_ref, un_det, total)
