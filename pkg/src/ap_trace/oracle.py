"""Brute-force references for the fast counting and hitting code.

Nothing here reuses the lattice kernels: candidate tuples are grown level by
level from float cell centres with the three defining inequalities evaluated
directly, 3-APs are found by scanning all triples, and walk distributions
come from enumerating every walk with exact rational weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numba as nb
import numpy as np

from ap_trace.brownian import BallSpec, PathSample, RefinePolicy, hits_ball
from ap_trace.detector import CountStatistic
from ap_trace.errors import BudgetExceeded
from ap_trace.geometry import APCandidate, APConfig, GridIndex
from ap_trace.lattice import CellSet

_SLACK = 1e-9


@dataclass(frozen=True)
class OracleBudget:
    max_elements: int = 300
    max_tuples: int = 2_000_000
    max_range: int = 500
    max_walks: int = 1 << 20
    max_cells: int = 200_000


def _centres(cells, spacing_hint: float | None = None) -> tuple[np.ndarray, float]:
    if isinstance(cells, CellSet):
        return cells.cells.astype(float) * cells.spacing, cells.spacing
    items = list(cells)
    if not items:
        return np.zeros((0, 0)), spacing_hint or 0.0
    return np.array([g.center for g in items], dtype=float), items[0].spacing


def _band(d0: float, eps: float) -> int:
    n = 0
    while d0 > eps * 2 ** (n + 1) * (1 + _SLACK):
        n += 1
    return n


def brute_enumerate_X(cells, cfg: APConfig, budget: OracleBudget = OracleBudget()) -> CountStatistic:
    """Every canonical candidate tuple, by exhaustive level-wise extension."""
    pts, spacing = _centres(cells, cfg.spacing)
    pts = np.unique(pts, axis=0) if len(pts) else pts
    if len(pts) > budget.max_elements:
        raise BudgetExceeded(len(pts), budget.max_elements)
    if len(pts) and abs(spacing - cfg.eps / 3) > 1e-12 * cfg.eps:
        raise ValueError("spacing mismatch")
    if len(pts):
        pts = pts[np.linalg.norm(pts, axis=1) <= cfg.domain_radius * (1 + _SLACK)]
    n = len(pts)
    sep = cfg.delta - 2 * cfg.eps
    tol = 4 * cfg.eps
    if n == 0:
        return CountStatistic(0, cfg.k, cfg.eps, {}, [], np.zeros(0), 0)
    gap = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    ok_gap = gap >= sep * (1 - _SLACK)
    prefixes = np.argwhere(ok_gap)  # ordered pairs
    for _ in range(cfg.k - 2):
        if len(prefixes) == 0:
            break
        grown = []
        size = 0
        for lo in range(0, len(prefixes), 4096):
            chunk = prefixes[lo:lo + 4096]
            target = 2 * pts[chunk[:, -1]] - pts[chunk[:, -2]]
            defect = np.linalg.norm(target[:, None, :] - pts[None, :, :], axis=-1)
            good = (defect <= tol * (1 + _SLACK)) & ok_gap[chunk[:, -1]]
            rows, cols = np.nonzero(good)
            grown.append(np.hstack([chunk[rows], cols[:, None]]))
            size += len(rows)
            if size > budget.max_tuples:
                raise BudgetExceeded(size, budget.max_tuples)
        prefixes = np.vstack(grown)
    keep = []
    for row in prefixes:
        first, last = tuple(pts[row[0]]), tuple(pts[row[-1]])
        if first <= last:
            keep.append(row)
    tuples = [APCandidate(pts[np.array(r)], cfg.eps,
                          float(np.linalg.norm(pts[r[:-2]] + pts[r[2:]] - 2 * pts[r[1:-1]], axis=1).max())
                          if cfg.k >= 3 else 0.0,
                          float(np.linalg.norm(np.diff(pts[np.array(r)], axis=0), axis=1).min()))
              for r in keep]
    d0 = np.array([np.linalg.norm(t.points, axis=1).min() for t in tuples])
    buckets: dict[int, int] = {}
    for v in d0:
        b = _band(float(v), cfg.eps)
        buckets[b] = buckets.get(b, 0) + 1
    return CountStatistic(len(tuples), cfg.k, cfg.eps, buckets, tuples, d0, len(tuples))


def brute_window_counts(cells, anchor: APCandidate, cfg: APConfig, scales) -> dict[int, int]:
    """Band filter over the oracle's full tuple list."""
    stat = brute_enumerate_X(cells, cfg)
    x = np.asarray(anchor.points, dtype=float)
    out = {}
    for k in scales:
        lo, hi = 2.0**k * cfg.eps, 2.0 ** (k + 1) * cfg.eps
        cnt = 0
        for t in stat.tuples:
            dist = np.linalg.norm(t.points - x, axis=1)
            if np.all(dist >= lo * (1 - _SLACK)) and np.all(dist < hi * (1 - _SLACK)):
                cnt += 1
        out[k] = cnt
    return out


@nb.njit(cache=True)
def _triples(sites):
    n, d = sites.shape
    total = 0
    for i in range(n):
        for j in range(i + 1, n):
            for l in range(j + 1, n):
                for p, q, r in ((i, j, l), (j, i, l), (l, i, j)):
                    # p is the middle candidate
                    hit = True
                    for t in range(d):
                        if 2 * sites[p, t] != sites[q, t] + sites[r, t]:
                            hit = False
                            break
                    if hit:
                        total += 1
                        break
    return total


def brute_3aps(range_set, budget: OracleBudget = OracleBudget()) -> int:
    """Unordered nondegenerate 3-APs by scanning every triple of distinct sites."""
    sites = range_set.sites if hasattr(range_set, "sites") else range_set
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[:, None]
    sites = np.unique(sites, axis=0) if len(sites) else sites
    if len(sites) > budget.max_range:
        raise BudgetExceeded(len(sites), budget.max_range)
    if len(sites) < 3:
        return 0
    return int(_triples(np.ascontiguousarray(sites)))


def exhaustive_walk_distribution(n: int, d: int = 1, budget: OracleBudget = OracleBudget()) -> dict[int, Fraction]:
    """Exact law of the 3-AP count of the range of an n-step walk."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    walks = (2 * d) ** n
    if walks > budget.max_walks:
        raise BudgetExceeded(walks, budget.max_walks)
    moves = []
    for i in range(d):
        e = [0] * d
        e[i] = 1
        moves.append(tuple(e))
        e = [0] * d
        e[i] = -1
        moves.append(tuple(e))
    tally: dict[int, int] = {}
    for path in itertools.product(range(2 * d), repeat=n):
        pos = (0,) * d
        seen = {pos}
        for m in path:
            pos = tuple(p + q for p, q in zip(pos, moves[m]))
            seen.add(pos)
        cnt = brute_3aps(np.array(sorted(seen), dtype=np.int64), OracleBudget(max_range=10**6))
        tally[cnt] = tally.get(cnt, 0) + 1
    return {c: Fraction(v, walks) for c, v in sorted(tally.items())}


def brute_hit_cells(path: PathSample, eps: float, domain_radius: float,
                    budget: OracleBudget = OracleBudget()) -> CellSet:
    """Test every lattice cell of the domain ball with a fully refined hits_ball."""
    h = eps / 3
    m = int(math.floor(domain_radius / h)) + 1
    d = path.dim
    if (2 * m + 1) ** d > budget.max_cells * 10:
        raise BudgetExceeded((2 * m + 1) ** d, budget.max_cells * 10)
    policy = RefinePolicy(margin=math.inf)
    out = []
    for cell in itertools.product(range(-m, m + 1), repeat=d):
        c = np.array(cell, dtype=float) * h
        if np.sqrt((c**2).sum()) > domain_radius * (1 + _SLACK):
            continue
        if hits_ball(path, BallSpec(tuple(c), eps), policy):
            out.append(GridIndex(cell, h))
    return CellSet.from_grid_indices(out, spacing=h, dim=d)
