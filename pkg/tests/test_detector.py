from __future__ import annotations

import numpy as np
import pytest
from fuzzing import fuzz_cell_set, fuzz_range
from hypothesis import given, settings
from hypothesis import strategies as st

from ap_trace.detector import (
    DetectorBudget,
    bucket_of,
    bucketize,
    closed_steps,
    count_3aps_exact,
    enumerate_X,
    estimate_cost,
    exists_X,
    sep2_lattice,
    window_counts,
    window_indicators,
)
from ap_trace.errors import BudgetExceeded
from ap_trace.geometry import APCandidate, APConfig, GridIndex, is_candidate
from ap_trace.lattice import CellSet
from ap_trace.oracle import brute_3aps, brute_enumerate_X, brute_window_counts


def line_cells(cfg: APConfig, xs) -> CellSet:
    pts = np.zeros((len(xs), cfg.dim), dtype=np.int64)
    pts[:, 0] = xs
    return CellSet(pts, cfg.spacing)


def test_three_collinear_cells():
    cfg = APConfig(3, 0.1, 0.5, 3)
    cells = line_cells(cfg, [0, 6, 12])  # centres 0, 0.2, 0.4: gaps 0.2 < delta
    assert enumerate_X(cells, cfg).x_total == 0
    cells = line_cells(cfg, [-9, 0, 9])  # gaps 0.3 >= delta - 2 eps
    stat = enumerate_X(cells, cfg)
    assert stat.x_total == 1 and not stat.truncated
    assert is_candidate(stat.tuples[0].points, cfg)


def test_grid_index_input_and_validation():
    cfg = APConfig(3, 0.1, 0.5, 2)
    items = [GridIndex((x, 0), cfg.spacing) for x in (-9, 0, 9)]
    assert enumerate_X(items, cfg).x_total == 1
    with pytest.raises(ValueError):
        enumerate_X(CellSet(np.zeros((1, 2), np.int64), 0.5), cfg)
    with pytest.raises(ValueError):
        enumerate_X(CellSet(np.zeros((1, 3), np.int64), cfg.spacing), cfg)
    assert enumerate_X(CellSet.empty(2, cfg.spacing), cfg).x_total == 0


def test_cells_outside_domain_ignored():
    cfg = APConfig(3, 0.1, 0.5, 1, 0.25)
    assert enumerate_X(line_cells(cfg, [-9, 0, 9]), cfg).x_total == 0
    assert enumerate_X(line_cells(cfg, [-9, 0, 9]), APConfig(3, 0.1, 0.5, 1, 1.5)).x_total == 1


def test_fuzz_against_oracle():
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(60):
        cells, cfg = fuzz_cell_set(rng, max_cells=80)
        a = enumerate_X(cells, cfg)
        b = brute_enumerate_X(cells, cfg)
        assert a.x_total == b.x_total and a.bucket_counts == b.bucket_counts
        assert exists_X(cells, cfg) == (b.x_total > 0)
        ta = sorted(tuple(map(tuple, np.round(t.points / cfg.spacing).astype(int))) for t in a.tuples)
        tb = sorted(tuple(map(tuple, np.round(t.points / cfg.spacing).astype(int))) for t in b.tuples)
        assert ta == tb
        if a.x_total:
            assert bucketize(a, cfg.eps) == a.bucket_counts
        hits += a.x_total > 0
    assert hits >= 10


def test_closed_tuples_counted_once():
    # a square walked round is a 5-tuple that returns to its start, so it is
    # its own reversal and must be counted once per starting corner
    cfg = APConfig(5, 0.1, 0.401, 2)
    cells = CellSet(np.array([[0, 0], [7, 0], [7, 7], [0, 7]]), cfg.spacing)
    a = enumerate_X(cells, cfg)
    b = brute_enumerate_X(cells, cfg)
    assert a.x_total == b.x_total > 0
    closed = [t for t in b.tuples if np.array_equal(t.points[0], t.points[-1])]
    assert closed
    rng = np.random.default_rng(3)
    noisy = CellSet(np.vstack([cells.cells, rng.integers(-3, 11, (20, 2))]), cfg.spacing)
    assert enumerate_X(noisy, cfg).x_total == brute_enumerate_X(noisy, cfg).x_total


def test_closed_steps_bounds():
    sep2 = 0.0
    for k in range(3, 8):
        b = closed_steps(k, sep2)
        assert b.shape == (k - 1,) and (b > 0).all() and (b <= 12 * (k - 2)).all()
    # k = 3 closed tuple: x, y, x with |2y - 2x| <= 12 so the one step is at most 6
    assert closed_steps(3, 0.0).max() == pytest.approx(6.0)


def test_budget_exceeded():
    cells, cfg = line_cells(APConfig(3, 0.1, 0.5, 1), list(range(-30, 31))), APConfig(3, 0.1, 0.5, 1)
    with pytest.raises(BudgetExceeded):
        enumerate_X(cells, cfg, budget=DetectorBudget(max_work=10))
    est = estimate_cost(cells, cfg)
    assert est.work > 0 and not est.fits(DetectorBudget(max_work=1))


def test_cap_limits_storage():
    cfg = APConfig(3, 0.1, 0.5, 1)
    cells = line_cells(cfg, list(range(-30, 31)))
    full = enumerate_X(cells, cfg)
    part = enumerate_X(cells, cfg, cap=5)
    assert part.x_total == full.x_total and part.kept == 5 and part.truncated
    with pytest.raises(ValueError):
        bucketize(part, cfg.eps)


def test_bucket_of_edges():
    eps = 0.1
    assert bucket_of(0.0, eps) == 0 and bucket_of(0.2, eps) == 0
    assert bucket_of(0.2001, eps) == 1 and bucket_of(0.4, eps) == 1
    assert bucket_of(0.41, eps) == 2 and bucket_of(0.8, eps) == 2


def test_windows_match_oracle():
    rng = np.random.default_rng(11)
    cfg = APConfig(3, 0.125, 0.6, 2, 1.0)
    anchor = APCandidate.from_points(np.array([[-0.5, 0.0], [0.0, 0.0], [0.5, 0.0]]), cfg.eps)
    for _ in range(5):
        cells = CellSet(rng.integers(-24, 25, (120, 2)), cfg.spacing)
        fast = window_counts(cells, anchor, cfg, scales=[0, 1, 2])
        assert fast == brute_window_counts(cells, anchor, cfg, [0, 1, 2])
        assert window_indicators(cells, anchor, cfg, scales=[0, 1, 2]) == {k: v > 0 for k, v in fast.items()}


def test_window_anchor_must_be_lattice():
    cfg = APConfig(3, 0.125, 0.6, 2, 1.0)
    anchor = APCandidate.from_points(np.array([[-0.51, 0.0], [0.0, 0.0], [0.5, 0.0]]), cfg.eps)
    with pytest.raises(ValueError):
        window_counts(CellSet.empty(2, cfg.spacing), anchor, cfg)


def test_sep2_lattice():
    cfg = APConfig(3, 0.125, 0.6, 3)
    assert sep2_lattice(cfg) == pytest.approx(8.4**2, rel=1e-6)


def test_3aps_small_cases():
    assert count_3aps_exact(np.array([[0], [1], [2], [3]])) == 2
    assert count_3aps_exact(np.array([[0, 0], [1, 1], [2, 2], [2, 0]])) == 1
    assert count_3aps_exact(np.zeros((0, 2), np.int64)) == 0
    assert brute_3aps(np.array([[0], [1], [2], [3]])) == 2


def test_3aps_fuzz():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = fuzz_range(rng, 150)
        assert count_3aps_exact(s) == brute_3aps(s)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6)), max_size=60))
def test_3aps_translation_invariant(sites):
    s = np.array(sites, dtype=np.int64).reshape(-1, 2)
    assert count_3aps_exact(s) == count_3aps_exact(s + np.array([3, -7])) == brute_3aps(s)
