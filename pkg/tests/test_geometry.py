from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ap_trace.geometry import (
    APCandidate,
    APConfig,
    GridIndex,
    ap_defect,
    candidate_mask,
    canonical,
    is_candidate,
    min_gap,
    snap_to_grid,
)
from ap_trace.lattice import CellSet, coarsen

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def tuples(k, d):
    return st.lists(st.lists(coords, min_size=d, max_size=d), min_size=k, max_size=k)


def test_defect_exact_ap():
    assert ap_defect([(0, 0, 0), (1, 0, 0), (2, 0, 0)]) == 0.0


def test_defect_bent():
    assert ap_defect([(0, 0, 0), (1, 0, 0), (2, 1, 0)]) == 1.0


def test_defect_errors():
    with pytest.raises(ValueError):
        ap_defect([(0, 0), (1, 0)])
    with pytest.raises(ValueError):
        ap_defect([(0, 0), (1, 0, 0), (2, 0)])


@settings(max_examples=200, deadline=None)
@given(tuples(5, 3))
def test_defect_matches_direct_formula(pts):
    pts = np.array(pts)
    worst = 0.0
    for i in range(1, 4):
        v = [pts[i - 1][c] + pts[i + 1][c] - 2 * pts[i][c] for c in range(3)]
        worst = max(worst, math.sqrt(sum(x * x for x in v)))
    assert ap_defect(pts) == pytest.approx(worst, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(tuples(4, 2), st.lists(coords, min_size=2, max_size=2), st.floats(0.1, 5))
def test_defect_invariances(pts, shift, lam):
    pts = np.array(pts)
    base = ap_defect(pts)
    assert ap_defect(pts + np.array(shift)) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert ap_defect(-pts) == pytest.approx(base, rel=1e-12, abs=1e-12)
    assert ap_defect(lam * pts) == pytest.approx(lam * base, rel=1e-9, abs=1e-9)


def test_candidate_examples():
    cfg = APConfig(3, 0.01, 0.1, 3)
    assert is_candidate([(0, 0, 0), (0.5, 0, 0), (1.0, 0, 0)], APConfig(3, 0.01, 0.1, 3, 2.0))
    assert not is_candidate([(0, 0, 0), (0.01, 0, 0), (0.02, 0, 0)], cfg)


def test_candidate_defect_boundary_is_closed():
    cfg = APConfig(3, 0.01, 0.1, 3)
    # second difference exactly 4 eps
    assert is_candidate([(0, 0, 0), (0.2, 0, 0), (0.4, 0.04, 0)], cfg)
    assert not is_candidate([(0, 0, 0), (0.2, 0, 0), (0.4, 0.0401, 0)], cfg)


def test_candidate_domain():
    cfg = APConfig(3, 0.01, 0.1, 1)
    assert not is_candidate([(0.5,), (0.8,), (1.1,)], cfg)
    assert is_candidate([(0.4,), (0.7,), (1.0,)], cfg)


def test_candidate_wrong_length():
    with pytest.raises(ValueError):
        is_candidate([(0, 0, 0)], APConfig(3, 0.01, 0.1))


@settings(max_examples=200, deadline=None)
@given(tuples(4, 2))
def test_candidate_reversal_invariant(pts):
    cfg = APConfig(4, 0.5, 2.5, 2, 10.0)
    pts = np.array(pts)
    assert is_candidate(pts, cfg) == is_candidate(pts[::-1], cfg)


@settings(max_examples=50, deadline=None)
@given(st.lists(tuples(3, 2), min_size=1, max_size=20))
def test_candidate_mask_matches_scalar(batch):
    cfg = APConfig(3, 0.5, 2.5, 2, 10.0)
    arr = np.array(batch, dtype=float)
    assert candidate_mask(arr, cfg).tolist() == [is_candidate(t, cfg) for t in arr]


def test_config_invariants():
    with pytest.raises(ValueError, match="eps < delta/4"):
        APConfig(3, 0.1, 0.1)
    with pytest.raises(ValueError):
        APConfig(3, 0.01, 3.0)
    with pytest.raises(ValueError):
        APConfig(1, 0.01, 0.1)
    assert APConfig(3, 0.01, 0.1).violations() == []


def test_snap_examples():
    assert snap_to_grid((0.49, 0, 0), 1.0).cell == (0, 0, 0)
    assert snap_to_grid((0.5, 0, 0), 1.0).cell == (1, 0, 0)
    assert snap_to_grid((-0.5, 0, 0), 1.0).cell == (0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(coords, min_size=1, max_size=5), st.floats(0.01, 3))
def test_snap_round_trip(p, h):
    g = snap_to_grid(p, h)
    assert np.linalg.norm(g.center - np.array(p)) <= h * math.sqrt(len(p)) / 2 * (1 + 1e-9)
    assert snap_to_grid(g.center, h) == g


def test_candidate_canonicalises():
    c = APCandidate.from_points([(1.0, 0.0), (0.5, 0.0), (0.0, 0.0)], 0.01)
    assert tuple(c.points[0]) == (0.0, 0.0)
    assert c.min_gap == 0.5 and c.defect == 0.0
    assert np.array_equal(canonical(c.points), c.points)
    assert min_gap(c.points) == 0.5


def test_cellset_order_independent():
    h = 1 / 3
    items = [GridIndex((2, 1), h), GridIndex((0, 0), h), GridIndex((2, 1), h), GridIndex((-1, 5), h)]
    a = CellSet.from_grid_indices(items)
    b = CellSet.from_grid_indices(items[::-1])
    assert np.array_equal(a.cells, b.cells) and len(a) == 3
    assert GridIndex((0, 0), h) in a and (2, 1) in a and (9, 9) not in a


def test_coarsen_stays_in_domain():
    fine = CellSet(np.array([[11], [12], [-12], [0]]), 1 / 12)
    coarse = coarsen(fine, 1 / 3, 1.0)
    assert (np.abs(coarse.centers()) <= 1.0 + 1e-12).all()
    assert coarse.as_set() == {(3,), (-3,), (0,)}
