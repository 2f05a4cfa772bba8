"""Monte Carlo experiments on Brownian traces and random-walk ranges.

Every experiment is a function of ``(parameters, trials, seed)``.  Trial ``i``
draws its randomness from streams keyed by ``(seed, i)`` only, trials are
processed in fixed-size chunks, and chunk results are merged in chunk order,
so the outcome does not depend on the number of workers.  Path ``i`` is the
same path at every eps and every k (common random numbers).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from ap_trace.brownian import (
    AdaptiveStepper,
    BallSpec,
    RefinePolicy,
    excursion_batch,
    hit_cells,
    hits_ball,
    refine_uniform,
    required_level,
    sample_path,
)
from ap_trace.detector import (
    DetectorBudget,
    count_bounds,
    enumerate_X,
    estimate_cost,
    exists_X,
    default_scales,
    window_indicators,
)
from ap_trace.errors import BudgetExceeded, ConditioningInfeasible
from ap_trace.geometry import APCandidate, APConfig, snap_cells
from ap_trace.lattice import CellSet
from ap_trace.parallel import chunks, pmap
from ap_trace.walk import block_3ap_counts

# Neighbour checks per second of the counting kernels on one core; only used
# to turn projected work into projected seconds in diagnostics.
WORK_RATE = 1.5e8


@dataclass(frozen=True)
class PathParams:
    horizon: float = 1.0
    dt_base: float = 2.0**-10
    refine: RefinePolicy = RefinePolicy()


def _se(values: np.ndarray) -> float:
    n = len(values)
    if n < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(n))


def _p_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else float("nan")


# ---------------------------------------------------------------------------
# moments


@dataclass
class MomentReport:
    eps: float
    k: int
    trials: int
    mean_X: float
    se_mean_X: float
    mean_X2: float
    se_mean_X2: float
    p_positive: float
    se_p_positive: float
    bucket_profile: dict[int, float]
    seed: int
    runtime: float
    per_path: list[int] = field(default_factory=list)
    work: int = 0

    def variance_ok(self, tolerance: float = 0.0) -> bool:
        return self.mean_X2 >= self.mean_X**2 - tolerance


def _moments_chunk(task):
    cfgs, params, seed, start, count, cap, budget = task
    base = cfgs[0]
    rows = []
    for i in range(start, start + count):
        path = sample_path(base.dim, params.horizon, params.dt_base, seed, i)
        cells = hit_cells(path, base.eps, base.domain_radius, params.refine)
        row = []
        for cfg in cfgs:
            st = enumerate_X(cells, cfg, cap=cap, budget=budget)
            row.append((st.x_total, st.bucket_counts, st.work))
        rows.append(row)
    return rows


def _moment_report(cfg: APConfig, col: list, seed: int, runtime: float) -> MomentReport:
    xs = [r[0] for r in col]
    n = len(xs)
    x = np.array(xs, dtype=float)
    x2 = np.array([v * v for v in xs], dtype=float)
    profile: dict[int, float] = {}
    for _, buckets, _ in col:
        for b, v in buckets.items():
            profile[b] = profile.get(b, 0.0) + v
    profile = {b: v / n for b, v in sorted(profile.items())}
    p = float(np.mean(x > 0))
    return MomentReport(
        eps=cfg.eps, k=cfg.k, trials=n,
        mean_X=float(sum(xs) / n), se_mean_X=_se(x),
        mean_X2=float(sum(v * v for v in xs) / n), se_mean_X2=_se(x2),
        p_positive=p, se_p_positive=_p_se(p, n),
        bucket_profile=profile, seed=seed, runtime=runtime,
        per_path=[int(v) for v in xs], work=int(sum(r[2] for r in col)),
    )


def run_moments_joint(cfg: APConfig, ks: Sequence[int], trials: int, seed: int, *, params: PathParams = PathParams(),
                      cap: int = 0, budget: DetectorBudget = DetectorBudget(), workers: int = 1,
                      chunk: int = 4) -> dict[int, MomentReport]:
    """Moments of X for several k on the same paths."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfgs = tuple(APConfig(k, cfg.eps, cfg.delta, cfg.dim, cfg.domain_radius) for k in ks)
    t0 = time.perf_counter()
    tasks = [(cfgs, params, seed, s, c, cap, budget) for s, c in chunks(trials, chunk)]
    rows = [r for part in pmap(_moments_chunk, tasks, workers) for r in part]
    runtime = time.perf_counter() - t0
    return {c.k: _moment_report(c, [r[j] for r in rows], seed, runtime) for j, c in enumerate(cfgs)}


def run_moments(cfg: APConfig, trials: int, seed: int, **kw) -> MomentReport:
    """Mean, second moment and positivity of X(eps) over ``trials`` paths."""
    return run_moments_joint(cfg, [cfg.k], trials, seed, **kw)[cfg.k]


@dataclass
class DominationReport:
    """Per-path comparison of X for k_lo and k_hi = k_lo + 1 on shared paths.

    Each count is bracketed (exact unless the closed-tuple search ran out of
    budget).  A path is ``holds`` if lo(X_lo) >= hi(X_hi), ``violated`` if
    hi(X_lo) < lo(X_hi) and ``undetermined`` otherwise.
    """

    cfg_lo: APConfig
    cfg_hi: APConfig
    trials: int
    seed: int
    bounds_lo: list[tuple[int, int]]
    bounds_hi: list[tuple[int, int]]
    verdicts: list[str]
    runtime: float

    @property
    def violations(self) -> int:
        return self.verdicts.count("violated")

    @property
    def undetermined(self) -> int:
        return self.verdicts.count("undetermined")

    @property
    def positive_hi(self) -> int:
        """Paths with X_hi > 0."""
        return sum(lo > 0 for lo, _ in self.bounds_hi)

    @property
    def existence_ok(self) -> bool:
        """X_hi > 0 implies X_lo > 0, which holds whenever some k_hi-tuple exists."""
        return all(not (h[0] > 0 and l[1] == 0) for l, h in zip(self.bounds_lo, self.bounds_hi))


def _domination_chunk(task):
    cfg_lo, cfg_hi, params, seed, start, count, budget, closed_work = task
    out = []
    for i in range(start, start + count):
        path = sample_path(cfg_lo.dim, params.horizon, params.dt_base, seed, i)
        cells = hit_cells(path, cfg_lo.eps, cfg_lo.domain_radius, params.refine)
        a = count_bounds(cells, cfg_lo, budget, closed_work)
        b = count_bounds(cells, cfg_hi, budget, closed_work)
        out.append(((a.lo, a.hi), (b.lo, b.hi)))
    return out


def run_domination(cfg: APConfig, trials: int, seed: int, *, params: PathParams = PathParams(),
                   budget: DetectorBudget = DetectorBudget(), closed_work: int | None = None,
                   workers: int = 1, chunk: int = 1) -> DominationReport:
    """Compare X(k) with X(k + 1) path by path, ``cfg.k`` being the smaller k."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    hi = APConfig(cfg.k + 1, cfg.eps, cfg.delta, cfg.dim, cfg.domain_radius)
    t0 = time.perf_counter()
    tasks = [(cfg, hi, params, seed, s, c, budget, closed_work) for s, c in chunks(trials, chunk)]
    rows = [r for part in pmap(_domination_chunk, tasks, workers) for r in part]
    verdicts = []
    for (l_lo, l_hi), (h_lo, h_hi) in rows:
        verdicts.append("holds" if l_lo >= h_hi else "violated" if l_hi < h_lo else "undetermined")
    return DominationReport(cfg, hi, trials, seed, [r[0] for r in rows], [r[1] for r in rows], verdicts,
                            time.perf_counter() - t0)


@dataclass
class CostProjection:
    eps: float
    k: int
    n_cells: float
    work_per_path: float
    states_per_layer: float
    trials: int

    @property
    def total_work(self) -> float:
        return self.work_per_path * self.trials

    @property
    def seconds(self) -> float:
        return self.total_work / WORK_RATE


def project_moments_cost(cfg: APConfig, trials: int, seed: int, *, params: PathParams = PathParams(),
                         pilot: int = 2, sample: int = 48) -> CostProjection:
    """Projected counting work for run_moments from a few pilot paths."""
    works, states, sizes = [], [], []
    for i in range(min(pilot, trials)):
        path = sample_path(cfg.dim, params.horizon, params.dt_base, seed, i)
        cells = hit_cells(path, cfg.eps, cfg.domain_radius, params.refine)
        est = estimate_cost(cells, cfg, sample=sample)
        works.append(est.work)
        states.append(est.layer_states)
        sizes.append(est.n_cells)
    return CostProjection(cfg.eps, cfg.k, float(np.mean(sizes)), float(np.mean(works)), float(np.max(states)), trials)


# ---------------------------------------------------------------------------
# scaling


@dataclass
class LogLogFit:
    slope: float
    intercept: float
    slope_se: float
    ci: tuple[float, float]


def fit_loglog(x: Sequence[float], y: Sequence[float], se: Sequence[float] | None = None) -> LogLogFit:
    """Weighted least squares of log y on log x.

    Weights are (y/se)^2, the inverse delta-method variance of log y; without
    usable standard errors the fit is unweighted.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.any(y <= 0):
        return LogLogFit(float("nan"), float("nan"), float("nan"), (float("nan"), float("nan")))
    lx, ly = np.log(x), np.log(y)
    if se is not None and np.all(np.isfinite(se)) and np.all(np.asarray(se) > 0):
        w = (y / np.asarray(se, dtype=float)) ** 2
    else:
        w = np.ones_like(lx)
    W = w.sum()
    mx, my = (w * lx).sum() / W, (w * ly).sum() / W
    sxx = (w * (lx - mx) ** 2).sum()
    slope = (w * (lx - mx) * (ly - my)).sum() / sxx
    intercept = my - slope * mx
    if se is not None and np.all(np.isfinite(se)) and np.all(np.asarray(se) > 0):
        slope_se = math.sqrt(1.0 / sxx)
    elif len(x) > 2:
        resid = ly - intercept - slope * lx
        slope_se = math.sqrt((resid**2).sum() / (len(x) - 2) / sxx)
    else:
        slope_se = float("nan")
    return LogLogFit(float(slope), float(intercept), slope_se, (slope - 1.96 * slope_se, slope + 1.96 * slope_se))


@dataclass
class ScalingSeries:
    statistic: str
    points: list[tuple[float, float, float]]
    fit: LogLogFit
    reports: list[MomentReport] = field(default_factory=list)

    @property
    def slope(self) -> float:
        return self.fit.slope


def check_ladder(ladder: Sequence[float]) -> list[str]:
    out = []
    if len(ladder) < 3:
        out.append("ladder needs at least 3 rungs")
        return out
    if any(not (e > 0) for e in ladder):
        out.append("ladder values must be positive")
        return out
    ratios = [ladder[i + 1] / ladder[i] for i in range(len(ladder) - 1)]
    if any(abs(r - ratios[0]) > 1e-9 * abs(ratios[0]) for r in ratios) or abs(ratios[0] - 1) < 1e-12:
        out.append("ladder must be geometric")
    return out


def series_from(statistic: str, eps: Sequence[float], values: Sequence[float], ses: Sequence[float]) -> ScalingSeries:
    pts = [(float(e), float(v), float(s)) for e, v, s in zip(eps, values, ses)]
    return ScalingSeries(statistic, pts, fit_loglog(eps, values, ses))


def run_scaling(template: APConfig, ladder: Sequence[float], trials: int, seed: int, *, statistic: str = "mean_X",
                params: PathParams = PathParams(), max_total_work: float = math.inf, workers: int = 1,
                budget: DetectorBudget = DetectorBudget()) -> ScalingSeries:
    """One moments run per rung, same paths on every rung, plus a log-log fit.

    Before any counting, each rung's cost is projected from pilot paths; a
    projection above ``max_total_work`` aborts with BudgetExceeded.
    """
    problems = check_ladder(ladder)
    if problems:
        raise ValueError("; ".join(problems))
    cfgs = [APConfig(template.k, e, template.delta, template.dim, template.domain_radius) for e in ladder]
    projected = 0.0
    for cfg in cfgs:
        proj = project_moments_cost(cfg, trials, seed, params=params)
        projected += proj.total_work
        if projected > max_total_work:
            raise BudgetExceeded(projected, max_total_work, f"projected work through eps={cfg.eps:g}")
    reports = []
    for cfg in cfgs:
        try:
            reports.append(run_moments(cfg, trials, seed, params=params, workers=workers, budget=budget))
        except BudgetExceeded as e:
            # the pilot projection averages two paths; a heavy path can still hit the per-path cap
            raise BudgetExceeded(e.work, e.limit, f"per-path {e.what} at eps={cfg.eps:g}") from e
    vals = [getattr(r, statistic) for r in reports]
    ses = [getattr(r, "se_" + statistic) for r in reports]
    series = series_from(statistic, ladder, vals, ses)
    series.reports = reports
    return series


# ---------------------------------------------------------------------------
# nesting


@dataclass
class NestingReport:
    trials: int
    eps: float
    lam: float
    k: int
    violations: int
    coarse_positive: int
    fine_checked: int
    fine_positive: int
    violating_paths: list[int] = field(default_factory=list)

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.trials if self.trials else 0.0


def _nesting_chunk(task):
    cfg, lam, params, seed, start, count, snap, budget = task
    fine_cfg = APConfig(cfg.k, lam * cfg.eps, cfg.delta, cfg.dim, cfg.domain_radius)
    rows = []
    for i in range(start, start + count):
        path = sample_path(cfg.dim, params.horizon, params.dt_base, seed, i)
        if snap is None:
            # Any tuple on a subset of the hit cells is a tuple on the full
            # set, so a positive answer on the coarse-level points is final.
            coarse = hit_cells(path, cfg.eps, cfg.domain_radius, params.refine)
            if exists_X(coarse, cfg, budget):
                rows.append((True, False, False))
                continue
            level = required_level(path, params.refine.threshold(fine_cfg.eps), params.refine.max_level)
            fine_path = refine_uniform(path, level)
            fine = hit_cells(fine_path, fine_cfg.eps, cfg.domain_radius, params.refine)
            coarse = hit_cells(fine_path, cfg.eps, cfg.domain_radius, params.refine)
            coarse_pos = exists_X(coarse, cfg, budget)
        else:
            fine = hit_cells(path, fine_cfg.eps, cfg.domain_radius, params.refine)
            coarse = snap(fine, cfg)
            coarse_pos = exists_X(coarse, cfg, budget)
        if coarse_pos:
            rows.append((True, False, False))
            continue
        fine_pos = exists_X(fine, fine_cfg, budget)
        rows.append((False, True, fine_pos))
    return rows


def nesting_violation(fine: CellSet, coarse: CellSet, cfg: APConfig, lam: float) -> bool:
    """X(lam eps) > 0 on ``fine`` while X(eps) = 0 on ``coarse``."""
    fine_cfg = APConfig(cfg.k, lam * cfg.eps, cfg.delta, cfg.dim, cfg.domain_radius)
    return exists_X(fine, fine_cfg) and not exists_X(coarse, cfg)


def run_nesting(trials: int, eps: float, lam: float, seed: int, *, k: int = 3, delta: float = 0.6, dim: int = 3,
                domain_radius: float = 1.0, params: PathParams = PathParams(),
                snap: Callable[[CellSet, APConfig], CellSet] | None = None, workers: int = 1, chunk: int = 16,
                budget: DetectorBudget = DetectorBudget()) -> NestingReport:
    """Count paths with X(lam eps) > 0 but X(eps) = 0.

    By default both grids are read off one path refined to the fine
    threshold.  ``snap`` replaces the coarse hit cells by a function of the
    fine ones (used to exercise deliberately broken snapping rules).
    """
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    cfg = APConfig(k, eps, delta, dim, domain_radius)
    APConfig(k, lam * eps, delta, dim, domain_radius)
    tasks = [(cfg, lam, params, seed, s, c, snap, budget) for s, c in chunks(trials, chunk)]
    rows = [r for part in pmap(_nesting_chunk, tasks, workers) for r in part]
    viol = [i for i, (_, _, fp) in enumerate(rows) if fp]
    return NestingReport(trials, eps, lam, k, len(viol), sum(r[0] for r in rows), sum(r[1] for r in rows),
                         len(viol), viol)


def coarsen_snap(fine: CellSet, cfg: APConfig) -> CellSet:
    """The snapping rule the nesting argument uses: nearest coarse cell,
    truncated toward zero when that would leave the domain."""
    from ap_trace.lattice import coarsen

    return coarsen(fine, cfg.spacing, cfg.domain_radius)


# ---------------------------------------------------------------------------
# covariance


def indicator_covariance(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Sample covariance of two indicator series and its standard error."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = len(a)
    if n < 2:
        return float("nan"), float("nan")
    psi = (a - a.mean()) * (b - b.mean())
    cov = psi.sum() / (n - 1)
    return float(cov), float(psi.std(ddof=1) / math.sqrt(n))


@dataclass
class CovarianceReport:
    anchor: list[list[float]]
    eps: float
    scales: list[int]
    trials: int
    accepted: int
    acceptance_rate: float
    floor: float
    marginals: dict[int, tuple[float, float]]
    cov: dict[tuple[int, int], tuple[float, float]]
    lag_cov: dict[int, tuple[float, float]]
    decay_rate: float

    def nonincreasing(self, n_se: float = 2.0) -> bool:
        lags = sorted(self.lag_cov)
        for a, b in zip(lags, lags[1:]):
            ca, sa = self.lag_cov[a]
            cb, sb = self.lag_cov[b]
            if cb > ca + n_se * math.hypot(sa, sb):
                return False
        return True


def _cov_chunk(task):
    cfg, anchor_pts, scales, params, seed, start, count = task
    anchor = APCandidate(np.asarray(anchor_pts, dtype=float), cfg.eps)
    anchor_cells = snap_cells(anchor.points, cfg.spacing)
    rows = []
    for i in range(start, start + count):
        path = sample_path(cfg.dim, params.horizon, params.dt_base, seed, i)
        cells = hit_cells(path, cfg.eps, cfg.domain_radius, params.refine)
        have = cells.as_set()
        if not all(tuple(int(v) for v in c) in have for c in anchor_cells):
            rows.append(None)
            continue
        ind = window_indicators(cells, anchor, cfg, scales)
        rows.append([int(ind[s]) for s in scales])
    return rows


def run_covariance(cfg: APConfig, anchor, trials: int, seed: int, *, scales: Sequence[int] | None = None,
                   floor: float = 0.01, params: PathParams = PathParams(), workers: int = 1,
                   chunk: int = 64) -> CovarianceReport:
    """cov(X_k > 0, X_l > 0 | H_x) by rejection on H_x.

    H_x (the path hits every anchor ball) is read off the same hit cells as
    the window indicators.  Raises ConditioningInfeasible when the
    acceptance rate falls below ``floor``.
    """
    anchor = np.asarray(anchor, dtype=float)
    if cfg.eps < 2.0**-4 or cfg.k > 4:
        raise ValueError("conditioning by rejection is limited to eps >= 1/16 and k <= 4")
    from ap_trace.geometry import is_candidate

    if not is_candidate(anchor, cfg):
        raise ValueError("anchor is not a candidate tuple")
    scales = list(default_scales(cfg) if scales is None else scales)
    tasks = [(cfg, anchor.tolist(), scales, params, seed, s, c) for s, c in chunks(trials, chunk)]
    rows = [r for part in pmap(_cov_chunk, tasks, workers) for r in part]
    acc = np.array([r for r in rows if r is not None], dtype=float).reshape(-1, len(scales))
    rate = len(acc) / trials
    if rate < floor or len(acc) < 2:
        raise ConditioningInfeasible(f"acceptance rate {rate:.4g} below floor {floor:.4g}", acceptance_rate=rate,
                                     floor=floor)
    marg = {s: (float(acc[:, j].mean()), _p_se(float(acc[:, j].mean()), len(acc))) for j, s in enumerate(scales)}
    cov = {}
    for a in range(len(scales)):
        for b in range(a, len(scales)):
            cov[(scales[a], scales[b])] = indicator_covariance(acc[:, a], acc[:, b])
    lag_cov = {}
    for lag in range(len(scales)):
        vals = [(c, s) for (ka, kb), (c, s) in cov.items() if kb - ka == lag]
        mean = float(np.mean([v[0] for v in vals]))
        se = float(math.sqrt(sum(v[1] ** 2 for v in vals)) / len(vals))
        lag_cov[lag] = (mean, se)
    pos = [(lag, c) for lag, (c, _) in lag_cov.items() if c > 0]
    if len(pos) >= 2:
        lx = np.array([p[0] for p in pos], dtype=float)
        ly = np.log([p[1] for p in pos])
        decay = float(-np.polyfit(lx, ly, 1)[0])
    else:
        decay = float("nan")
    return CovarianceReport(anchor.tolist(), cfg.eps, scales, trials, len(acc), rate, floor, marg, cov, lag_cov, decay)


# ---------------------------------------------------------------------------
# ball hitting


@dataclass
class HitReport:
    center: tuple
    radius: float
    horizon: float
    trials: int
    hits: int
    rate: float
    se: float

    def finite_horizon_law(self) -> float:
        """P(hit before the horizon) for d = 3 from the origin.

        The hitting time of the sphere |x - v| = r has the law of the
        first passage of a 1-d Brownian motion to |v| - r, thinned by r/|v|:
        P = (r/|v|) erfc((|v| - r) / sqrt(2 T)).
        """
        dist = math.sqrt(sum(c * c for c in self.center))
        if len(self.center) != 3 or dist <= self.radius:
            return float("nan")
        return self.radius / dist * math.erfc((dist - self.radius) / math.sqrt(2 * self.horizon))


def _hit_chunk(task):
    ball, horizon, dt_base, refine, seed, start, count = task
    return sum(hits_ball(sample_path(ball.dim, horizon, dt_base, seed, i), ball, refine)
               for i in range(start, start + count))


def run_hitting(ball: BallSpec, trials: int, seed: int, *, horizon: float, dt_base: float = 1.0,
                refine: RefinePolicy = RefinePolicy(bridge=True), workers: int = 1, chunk: int = 4096) -> HitReport:
    """Fraction of paths from the origin that hit ``ball`` by ``horizon``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tasks = [(ball, horizon, dt_base, refine, seed, s, c) for s, c in chunks(trials, chunk)]
    hits = int(sum(pmap(_hit_chunk, tasks, workers)))
    p = hits / trials
    return HitReport(ball.center, ball.radius, horizon, trials, hits, p, _p_se(p, trials))


# ---------------------------------------------------------------------------
# excursions


def radii_rule(k: int, l: int, eps: float) -> tuple[float, float]:
    """r = 2^((2k + l)/3) eps and s = 2^((k + 2l)/3) eps; needs k < l."""
    if not k < l:
        raise ValueError("radii rule needs k < l so that r < s")
    return 2.0 ** ((2 * k + l) / 3) * eps, 2.0 ** ((k + 2 * l) / 3) * eps


@dataclass
class ExcursionReport:
    r: float
    s: float
    trials: int
    tail: list[tuple[int, float, float]]
    ratio: float
    ratio_se: float
    fit_ratio: float
    fit_r2: float
    mean_steps: float
    escape: float

    def tail_monotone(self) -> bool:
        probs = [p for _, p, _ in self.tail]
        return all(b <= a for a, b in zip(probs, probs[1:]))


def default_stepper(r: float, s: float) -> AdaptiveStepper:
    """Bridge-corrected steps no finer than 0.03 r; escape at 10^4 s, where
    the return probability from the s-sphere before escaping differs from
    r/s by a relative 10^-4 (1 - r/s)."""
    return AdaptiveStepper(escape=1e4 * s, dt_min=(0.03 * r) ** 2)


def _exc_chunk(task):
    seed, start, count, origin, balls, r, s, stepper = task
    m, steps = excursion_batch(seed, start, count, origin, balls, r, s, stepper)
    return m, steps


def run_excursion_tail(r: float, s: float, trials: int, seed: int, *, centers=None, start=None, dim: int = 3,
                       stepper: AdaptiveStepper | None = None, workers: int = 1,
                       chunk: int = 8192) -> ExcursionReport:
    """Tail of the excursion count M and the geometric ratio fit.

    Default layout: one ball centred at distance r from the origin, path
    started at the origin, i.e. on the r-sphere.  Each entry except the last
    is followed by a return, so the ratio estimate is returns / entries.
    """
    if not (0 < r < s):
        raise ValueError("need 0 < r < s")
    if centers is None:
        centers = [[r] + [0.0] * (dim - 1)]
    balls = [BallSpec(tuple(c), r) for c in centers]
    origin = np.zeros(dim) if start is None else np.asarray(start, dtype=float)
    stepper = stepper or default_stepper(r, s)
    tasks = [(seed, a, c, origin, balls, r, s, stepper) for a, c in chunks(trials, chunk)]
    parts = pmap(_exc_chunk, tasks, workers)
    M = np.concatenate([p[0] for p in parts])
    steps = np.concatenate([p[1] for p in parts])
    entries = int(M.sum())
    returns = int(np.maximum(M - 1, 0).sum())
    ratio = returns / entries if entries else float("nan")
    ratio_se = _p_se(ratio, entries) if entries else float("nan")
    tail = []
    top = int(M.max()) if len(M) else 0
    for m in range(1, top + 1):
        p = float(np.mean(M >= m))
        tail.append((m, p, _p_se(p, trials)))
    usable = [(m, p) for m, p, _ in tail if p * trials >= 10]
    if len(usable) >= 2:
        mm = np.array([u[0] for u in usable], dtype=float)
        lp = np.log([u[1] for u in usable])
        w = np.array([u[1] for u in usable]) * trials
        coef = np.polyfit(mm, lp, 1, w=np.sqrt(w))
        pred = np.polyval(coef, mm)
        ss_res = float(((lp - pred) ** 2).sum())
        ss_tot = float(((lp - lp.mean()) ** 2).sum())
        fit_ratio, r2 = float(math.exp(coef[0])), (1 - ss_res / ss_tot if ss_tot > 0 else 1.0)
    else:
        fit_ratio, r2 = float("nan"), float("nan")
    return ExcursionReport(r, s, trials, tail, ratio, ratio_se, fit_ratio, r2, float(steps.mean()), stepper.escape)


# ---------------------------------------------------------------------------
# random-walk range, 3-AP counts

WALK_BLOCK = 4096


@dataclass
class LdpRung:
    n: int
    trials: int
    histogram: dict[int, int]
    mean: float
    se_mean: float
    var: float
    quantiles: dict[str, float]
    exact: dict[int, Fraction] | None = None
    dumps: list[dict] = field(default_factory=list)

    def max_z(self) -> float:
        """Largest |empirical - exact| / stderr over the support of either law."""
        if self.exact is None:
            return float("nan")
        worst = 0.0
        for c in set(self.exact) | set(self.histogram):
            p = float(self.exact.get(c, 0))
            q = self.histogram.get(c, 0) / self.trials
            se = math.sqrt(p * (1 - p) / self.trials)
            if se == 0:
                if q != p:
                    return math.inf
                continue
            worst = max(worst, abs(q - p) / se)
        return worst


@dataclass
class LdpReport:
    d: int
    rungs: list[LdpRung]
    mean_exponent: LogLogFit | None
    var_exponent: LogLogFit | None
    partial: bool


def _ldp_chunk(task):
    d, n, seed, block, size = task
    return block_3ap_counts(d, n, seed, block, WALK_BLOCK)[:size]


def run_ldp(d: int, ladder: Sequence[int], trials: int, seed: int, *, exact: bool = False,
            quantiles: Sequence[float] = (0.5, 0.9, 0.99, 0.999), dump_quantile: float | None = None,
            max_dumps: int = 5, max_steps: float = 5e9, workers: int = 1) -> LdpReport:
    """Distribution of the number of 3-APs in the range of an n-step walk.

    Rungs are processed in ladder order; a rung whose cost (n * trials,
    plus the quadratic range scan) would push the total over ``max_steps``
    is skipped and the report is flagged partial.
    """
    from ap_trace.oracle import exhaustive_walk_distribution
    from ap_trace.walk import sites_from_codes
    from ap_trace.rng import stream

    rungs = []
    spent = 0.0
    partial = False
    for n in ladder:
        if n < 0:
            raise ValueError("n must be nonnegative")
        cost = trials * (n + 1) * max(1.0, (n + 1) / 8)
        if spent + cost > max_steps:
            partial = True
            break
        spent += cost
        sizes = chunks(trials, WALK_BLOCK)
        tasks = [(d, n, seed, b, c) for b, (_, c) in enumerate(sizes)]
        counts = np.concatenate(pmap(_ldp_chunk, tasks, workers)) if tasks else np.zeros(0, np.int64)
        vals, freq = np.unique(counts, return_counts=True)
        hist = {int(v): int(f) for v, f in zip(vals, freq)}
        x = counts.astype(float)
        qs = {f"{q:g}": float(np.quantile(x, q)) for q in quantiles}
        rung = LdpRung(n, trials, hist, float(x.mean()), _se(x), float(x.var(ddof=1)) if trials > 1 else 0.0, qs)
        if exact:
            rung.exact = exhaustive_walk_distribution(n, d)
        if dump_quantile is not None and trials:
            thr = float(np.quantile(x, dump_quantile))
            idx = np.flatnonzero(x > thr)[:max_dumps]
            for t in idx:
                block, row = divmod(int(t), WALK_BLOCK)
                codes = stream(seed, "walk-block", d, n, block).integers(0, 2 * d, size=(WALK_BLOCK, n),
                                                                          dtype=np.int64)[row]
                sites = np.unique(sites_from_codes(codes, d), axis=0)
                rung.dumps.append({"trial": int(t), "count": int(counts[t]), "sites": sites.tolist()})
        rungs.append(rung)
    usable = [r for r in rungs if r.n > 0 and r.mean > 0]
    mean_fit = fit_loglog([r.n for r in usable], [r.mean for r in usable], [r.se_mean for r in usable]) \
        if len(usable) >= 2 else None
    var_fit = fit_loglog([r.n for r in usable], [r.var for r in usable]) if len(usable) >= 2 and all(
        r.var > 0 for r in usable) else None
    return LdpReport(d, rungs, mean_fit, var_fit, partial)
