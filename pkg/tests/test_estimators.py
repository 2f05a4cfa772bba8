from __future__ import annotations

import math

import numpy as np
import pytest

from ap_trace.errors import BudgetExceeded, ConditioningInfeasible
from ap_trace.estimators import (
    PathParams,
    coarsen_snap,
    fit_loglog,
    indicator_covariance,
    radii_rule,
    run_covariance,
    run_domination,
    run_excursion_tail,
    run_ldp,
    run_moments,
    run_moments_joint,
    run_nesting,
    run_scaling,
)
from ap_trace.geometry import APConfig
from ap_trace.lattice import CellSet

SHORT = PathParams(horizon=0.1)
# one-dimensional paths keep the hit sets, and so the exact counts, small
LINE = PathParams(horizon=0.5)


def test_fit_loglog_recovers_slopes():
    eps = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    f = fit_loglog(eps, 3.0 / eps)
    assert f.slope == pytest.approx(-1.0) and f.intercept == pytest.approx(math.log(3.0))
    g = fit_loglog(eps, np.full(4, 7.0), se=np.full(4, 0.1))
    assert g.slope == pytest.approx(0.0, abs=1e-12) and g.ci[0] < 0 < g.ci[1]
    assert math.isnan(fit_loglog(eps, np.array([1.0, 0.0, 1.0, 1.0])).slope)


def test_fit_loglog_noise_within_ci():
    rng = np.random.default_rng(0)
    eps = 2.0 ** -np.arange(3, 9)
    inside = 0
    for _ in range(200):
        y = (1 / eps) * np.exp(rng.normal(0, 0.05, len(eps)))
        f = fit_loglog(eps, y, se=0.05 * y)
        inside += f.ci[0] <= -1 <= f.ci[1]
    assert inside >= 180


def test_moments_joint_shares_paths():
    cfg = APConfig(3, 0.125, 0.6, 1)
    joint = run_moments_joint(cfg, [3, 4], 6, 2, params=LINE)
    alone = run_moments(APConfig(4, 0.125, 0.6, 1), 6, 2, params=LINE)
    assert joint[4].per_path == alone.per_path
    assert joint[3].variance_ok() and joint[3].trials == 6
    assert 0 <= joint[4].p_positive <= joint[3].p_positive <= 1


def test_zero_fixture():
    # paths far too short to span a progression
    r = run_moments(APConfig(3, 0.125, 0.6, 3), 5, 0, params=PathParams(horizon=1e-3, dt_base=1e-4))
    assert r.mean_X == 0 and r.p_positive == 0 and r.mean_X2 == 0


def test_scaling_budget_gate():
    cfg = APConfig(5, 0.125, 0.6, 3)
    with pytest.raises(BudgetExceeded):
        run_scaling(cfg, [0.125, 0.0625, 0.03125], 4, 0, params=SHORT, max_total_work=1.0)
    with pytest.raises(ValueError):
        run_scaling(cfg, [0.125, 0.1], 4, 0)


def test_domination_small():
    cfg = APConfig(3, 0.125, 0.6, 1)
    r = run_domination(cfg, 6, 1, params=LINE)
    assert len(r.verdicts) == 6 and r.positive_hi > 0 and r.undetermined == 0 and r.existence_ok
    # the closed-tuple search finishes here, so both counts are exact
    assert all(lo == hi for lo, hi in r.bounds_lo + r.bounds_hi)


def test_nesting_holds_and_negative_control():
    kw = dict(k=3, delta=0.6, params=PathParams(horizon=0.1), chunk=4)
    for h in (0.02, 0.1):
        good = run_nesting(12, 0.125, 0.5, 0, k=3, delta=0.6, params=PathParams(horizon=h))
        assert good.violations == 0
        assert run_nesting(12, 0.125, 0.5, 0, k=3, delta=0.6, params=PathParams(horizon=h),
                           snap=coarsen_snap).violations == 0

    def double_ratio(fine: CellSet, cfg: APConfig) -> CellSet:
        # spacing ratio applied twice, so coarse centres sit at lam times the true position
        ratio = fine.spacing / cfg.spacing
        return CellSet(np.floor(fine.cells * ratio * ratio + 0.5).astype(np.int64), cfg.spacing)

    broken = run_nesting(12, 0.125, 0.5, 0, snap=double_ratio, **kw)
    assert broken.violations > 0 and broken.violation_fraction > 0


def test_indicator_covariance_null_and_diagonal():
    rng = np.random.default_rng(1)
    a = (rng.random(40000) < 0.3).astype(float)
    b = (rng.random(40000) < 0.6).astype(float)
    c, s = indicator_covariance(a, b)
    assert abs(c) < 4 * s
    v, _ = indicator_covariance(a, a)
    assert v == pytest.approx(a.mean() * (1 - a.mean()) * len(a) / (len(a) - 1))


def test_covariance_gates():
    cfg = APConfig(3, 0.125, 0.6, 3, 3.0)
    anchor = [[-0.5, 0, 0], [0, 0, 0], [0.5, 0, 0]]
    with pytest.raises(ConditioningInfeasible):
        run_covariance(cfg, anchor, 20, 0, floor=0.9, params=SHORT)
    with pytest.raises(ValueError):
        run_covariance(APConfig(3, 1 / 32, 0.6, 3), anchor, 10, 0)
    with pytest.raises(ValueError):
        run_covariance(cfg, [[-0.5, 0, 0], [0, 0.4, 0], [0.5, 0, 0]], 10, 0)


def test_covariance_small_run():
    cfg = APConfig(3, 0.125, 0.6, 3, 3.0)
    anchor = [[-0.5, 0, 0], [0, 0, 0], [0.5, 0, 0]]
    r = run_covariance(cfg, anchor, 200, 0, scales=[1, 2], floor=0.01)
    assert r.accepted > 0 and r.acceptance_rate == r.accepted / 200
    for k, (p, _) in r.marginals.items():
        assert r.cov[(k, k)][0] == pytest.approx(p * (1 - p) * r.accepted / (r.accepted - 1))


def test_radii_rule():
    r, s = radii_rule(1, 4, 0.01)
    assert r == pytest.approx(0.01 * 2**2) and s == pytest.approx(0.01 * 2**3)
    with pytest.raises(ValueError):
        radii_rule(3, 3, 0.01)


def test_excursion_tail_small():
    r = run_excursion_tail(0.25, 0.5, 2000, 0)
    assert r.tail[0][1] == 1.0 and r.tail_monotone()
    assert abs(r.ratio - 0.5) < 4 * r.ratio_se + 0.01


def test_ldp_zero_and_exact():
    assert run_ldp(1, [0], 100, 0).rungs[0].mean == 0
    rep = run_ldp(1, [5, 7], 50000, 0, exact=True)
    for rung in rep.rungs:
        assert rung.max_z() < 4.5


def test_ldp_dumps_reproducible(tmp_path):
    a = run_ldp(2, [30], 4000, 9, dump_quantile=0.99)
    b = run_ldp(2, [30], 4000, 9, dump_quantile=0.99, workers=2)
    assert a.rungs[0].histogram == b.rungs[0].histogram
    assert a.rungs[0].dumps == b.rungs[0].dumps and a.rungs[0].dumps
