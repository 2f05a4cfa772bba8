from __future__ import annotations

import math

import numpy as np
import pytest

from ap_trace.brownian import (
    AdaptiveStepper,
    BallSpec,
    PathSample,
    RefinePolicy,
    adaptive_path,
    excursion_batch,
    excursion_count,
    hit_cells,
    hits_ball,
    refine_uniform,
    required_level,
    sample_path,
)
from ap_trace.oracle import brute_hit_cells


def test_sample_path_shape_and_seed():
    p = sample_path(3, 1.0, 1e-3, 7)
    assert p.points.shape == (1001, 3) and p.times[-1] == 1.0
    assert np.array_equal(p.points[0], np.zeros(3))
    q = sample_path(3, 1.0, 1e-3, 7)
    assert np.array_equal(p.points, q.points)
    assert not np.array_equal(p.points, sample_path(3, 1.0, 1e-3, 8).points)
    assert not np.array_equal(p.points, sample_path(3, 1.0, 1e-3, 7, 1).points)


def test_sample_path_rejects_bad_input():
    for args in [(3, 0.0, 1e-3, 0), (3, 1.0, -1.0, 0), (0, 1.0, 1e-3, 0)]:
        with pytest.raises(ValueError):
            sample_path(*args)


def test_increment_variance():
    p = sample_path(2, 50.0, 1e-2, 3)
    inc = np.diff(p.points, axis=0)
    assert inc.var() == pytest.approx(1e-2, rel=0.03)


def test_refinement_keeps_coarse_points():
    p = sample_path(2, 1.0, 2**-6, 1)
    f = refine_uniform(p, 3)
    assert f.level == 3 and len(f.times) == 8 * (len(p.times) - 1) + 1
    assert np.array_equal(f.points[::8], p.points)
    # refinement is a deterministic function of the path identity
    assert np.array_equal(refine_uniform(refine_uniform(p, 1), 3).points, f.points)


def test_refined_midpoint_variance():
    p = sample_path(1, 200.0, 1.0, 2)
    f = refine_uniform(p, 1)
    mid = f.points[1::2, 0] - 0.5 * (p.points[:-1, 0] + p.points[1:, 0])
    assert mid.var() == pytest.approx(0.25, rel=0.1)


def test_required_level():
    p = sample_path(1, 1.0, 2**-4, 0)
    assert required_level(p, 0.25) == 0
    assert required_level(p, 0.125) == 2


def test_hits_ball_stored_point():
    p = PathSample([0.0, 1.0], [[0.0, 0.0], [1.0, 0.0]], 1.0, 0)
    assert hits_ball(p, BallSpec((1.0, 0.0), 0.1), refine=None)
    assert not hits_ball(p, BallSpec((0.5, 0.5), 0.1), refine=None)
    with pytest.raises(ValueError):
        hits_ball(p, BallSpec((0.0, 0.0, 0.0), 0.1))


def test_hits_ball_is_monotone_in_radius_with_fixed_threshold():
    policy = RefinePolicy(abs=0.02)
    for seed in range(10):
        p = sample_path(3, 1.0, 1e-2, seed)
        hits = [hits_ball(p, BallSpec((0.6, 0.0, 0.0), r), policy) for r in (0.05, 0.1, 0.2, 0.4)]
        assert hits == sorted(hits)


def test_hit_cells_matches_brute_force():
    for seed in range(3):
        p = sample_path(2, 0.3, 2**-8, seed)
        fast = hit_cells(p, 0.25, 1.0)
        slow = brute_hit_cells(p, 0.25, 1.0)
        assert fast.as_set() == slow.as_set()
        assert len(fast) > 0


def test_excursion_count_hand_path():
    pts = np.array([[2.0], [0.5], [0.9], [0.1], [3.0], [0.0], [2.0]])
    p = PathSample(np.arange(len(pts), dtype=float), pts, 1.0, 0)
    assert excursion_count(p, [BallSpec((0.0,), 0.5)], 0.5, 1.0) == 2
    with pytest.raises(ValueError):
        excursion_count(p, [BallSpec((0.0,), 0.5)], 1.0, 0.5)
    with pytest.raises(ValueError):
        excursion_count(p, [BallSpec((0.0,), 0.5), BallSpec((1.5,), 0.5)], 0.5, 1.0)


def test_excursion_batch_is_seeded_per_trial():
    balls = [BallSpec((0.25, 0.0, 0.0), 0.25)]
    st = AdaptiveStepper(escape=50.0)
    m1, s1 = excursion_batch(5, 0, 40, np.zeros(3), balls, 0.25, 0.5, st)
    m2, s2 = excursion_batch(5, 20, 20, np.zeros(3), balls, 0.25, 0.5, st)
    assert np.array_equal(m1[20:], m2) and np.array_equal(s1[20:], s2)
    assert (m1 >= 1).all()  # the start lies on the r-sphere


def test_adaptive_path_reproduces_batch_without_bridge():
    balls = [BallSpec((0.3, 0.0, 0.0), 0.25)]
    st = AdaptiveStepper(bridge=False, dt_min=1e-5, escape=20.0)
    m, _ = excursion_batch(11, 0, 15, np.zeros(3), balls, 0.25, 0.5, st)
    for t in range(15):
        p = adaptive_path(11, t, np.zeros(3), balls, 0.25, 0.5, st)
        assert excursion_count(p, balls, 0.25, 0.5) == m[t]


def test_bridge_crossing_probability_flat_limit():
    # with the sphere far away compared with the step scale the planar formula applies;
    # the tail ratio must then be close to r/s
    balls = [BallSpec((0.5, 0.0, 0.0), 0.5)]
    st = AdaptiveStepper(escape=1e4, dt_min=0.015**2)
    m, _ = excursion_batch(3, 0, 4000, np.zeros(3), balls, 0.5, 1.0, st)
    p1 = (m >= 2).mean()
    assert abs(p1 - 0.5) < 3 * math.sqrt(0.25 / 4000) + 0.01


def test_bridge_correction_matches_finite_horizon_law():
    from ap_trace.estimators import run_hitting

    ball = BallSpec((2.0, 0.0, 0.0), 0.25)
    rep = run_hitting(ball, 20000, 5, horizon=200.0)
    plain = run_hitting(ball, 20000, 5, horizon=200.0, refine=RefinePolicy())
    law = rep.finite_horizon_law()
    assert law == pytest.approx(0.1127, abs=5e-5)
    assert abs(rep.rate - law) < 4 * rep.se
    # without the correction the sampled points miss a visible share of entries
    assert plain.rate <= rep.rate
