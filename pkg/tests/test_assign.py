import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from oapsense.assign import (
    CostMatrix,
    euclidean_cost,
    mahalanobis_cost,
    solve_lap,
    solve_lap_rect,
)
from oapsense.errors import DomainError


def brute_force(C):
    n = C.shape[0]
    best = min(itertools.permutations(range(n)), key=lambda p: (sum(C[i, p[i]] for i in range(n)), p))
    return best, sum(C[i, best[i]] for i in range(n))


def padded_brute_force(C, cmax):
    """Exhaustive optimum over partial matchings with per-item penalty cmax."""
    n_ref, n_det = C.shape
    best = np.inf
    for k in range(min(n_ref, n_det) + 1):
        for rows in itertools.combinations(range(n_ref), k):
            for cols in itertools.permutations(range(n_det), k):
                cost = sum(C[i, j] for i, j in zip(rows, cols)) + cmax * (n_ref + n_det - 2 * k)
                best = min(best, cost)
    return best


def test_euclidean_cost_basics():
    p = np.array([[0, 0], [1, 2], [-3, 4]], dtype=float)
    assert np.all(np.diag(euclidean_cost(p, p).values) == 0)
    assert euclidean_cost([[0, 0]], [[3, 4]]).values[0, 0] == 5.0
    q = np.array([[5, 5], [0, 1]], dtype=float)
    np.testing.assert_array_equal(euclidean_cost(p, q).values, euclidean_cost(q, p).values.T)


def test_mahalanobis_cost_values():
    rng = np.random.default_rng(0)
    r, d = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    eye = np.broadcast_to(np.eye(2), (4, 2, 2))
    np.testing.assert_allclose(mahalanobis_cost(r, d, eye).values, euclidean_cost(r, d).values, rtol=1e-14)
    s = 0.3
    np.testing.assert_allclose(mahalanobis_cost(r, d, s**2 * eye).values,
                               euclidean_cost(r, d).values / s, rtol=1e-13)
    assert mahalanobis_cost([[0, 0]], [[2, 0]], [np.diag([4.0, 1.0])]).values[0, 0] == pytest.approx(1.0)


def test_mahalanobis_rejects_bad_covariance():
    with pytest.raises(DomainError):
        mahalanobis_cost([[0, 0]], [[1, 1]], [np.diag([1.0, -1.0])])
    with pytest.raises(DomainError):
        mahalanobis_cost([[0, 0]], [[1, 1]], [np.array([[1.0, 0.5], [0.0, 1.0]])])


def test_cost_matrix_validation():
    with pytest.raises(DomainError):
        CostMatrix([[np.nan, 1.0]])
    with pytest.raises(DomainError):
        CostMatrix([[-1.0]])


def test_solve_lap_small_cases():
    r = solve_lap(np.diag([0.0, 0.0, 0.0]) + 1 - np.eye(3))
    assert r.pairs == [(0, 0), (1, 1), (2, 2)] and r.total_cost == 0
    r = solve_lap(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert r.pairs == [(0, 0), (1, 1)] and r.total_cost == 0
    assert solve_lap(np.zeros((0, 0))).pairs == []
    with pytest.raises(ValueError):
        solve_lap(np.zeros((2, 3)))


def test_solve_lap_ties_are_lexicographic():
    r = solve_lap(np.ones((4, 4)))
    assert r.pairs == [(i, i) for i in range(4)]
    C = np.array([[1.0, 1.0, 5.0], [1.0, 1.0, 5.0], [5.0, 5.0, 0.0]])
    assert solve_lap(C).pairs == [(0, 0), (1, 1), (2, 2)]


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.integers(0, 4).map(float)))
def test_solve_lap_matches_brute_force_with_ties(C):
    perm, cost = brute_force(C)
    res = solve_lap(C)
    assert res.total_cost == cost
    # the lexicographically smallest optimal permutation
    assert tuple(j for _, j in res.pairs) == perm


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_solve_lap_agrees_with_scipy(n, seed):
    C = np.random.default_rng(seed).random((n, n)) * 100
    r, c = linear_sum_assignment(C)
    res = solve_lap(C)
    assert res.total_cost == pytest.approx(C[r, c].sum(), rel=1e-12)
    res.validate(n, n)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.floats(0.05, 2.0), st.integers(0, 2**32 - 1))
def test_solve_lap_rect_matches_padded_brute_force(n_ref, n_det, cmax, seed):
    C = np.random.default_rng(seed).random((n_ref, n_det)) * 3
    res = solve_lap_rect(C, cmax)
    res.validate(n_ref, n_det)
    assert res.total_cost == pytest.approx(padded_brute_force(C, cmax), abs=1e-12)


def test_solve_lap_rect_outlier_left_unassigned():
    cmax = 1.0
    refs = np.array([[0, 0], [5, 0], [10, 0]], dtype=float)
    dets = np.array([[0.1, 0], [5.1, 0], [10, 10 * cmax + 100]], dtype=float)
    res = solve_lap_rect(euclidean_cost(refs, dets), cmax)
    assert res.pairs == [(0, 0), (1, 1)]
    assert res.unassigned_refs == [2] and res.unassigned_dets == [2]


def test_solve_lap_rect_reduces_to_square():
    rng = np.random.default_rng(4)
    C = rng.random((6, 6))
    assert solve_lap_rect(C, 10.0).pairs == solve_lap(C).pairs


def test_solve_lap_rect_empty_side():
    res = solve_lap_rect(np.zeros((3, 0)), 2.5)
    assert res.pairs == [] and res.unassigned_refs == [0, 1, 2]
    assert res.total_cost == 7.5
    with pytest.raises(DomainError):
        solve_lap_rect(np.zeros((1, 1)), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.floats(1e-4, 1e2), st.integers(0, 2**32 - 1))
def test_isotropic_mahalanobis_pairs_equal_euclidean(n, sigma, seed):
    rng = np.random.default_rng(seed)
    r, d = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    cov = np.broadcast_to(sigma**2 * np.eye(2), (n, 2, 2))
    assert solve_lap(mahalanobis_cost(r, d, cov)).pairs == solve_lap(euclidean_cost(r, d)).pairs
