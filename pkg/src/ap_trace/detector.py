"""Counting eps-approximate progressions among hit cells, and 3-APs in ranges.

``enumerate_X`` returns exact counts of canonical candidate tuples (first
point lexicographically <= last point).  The count comes from the pair-state
dynamic programme in :mod:`ap_trace._chains`, which counts ordered tuples
``T``.  Reversal pairs the ordered tuples up, except that a tuple whose first
and last points coincide is canonical in both orientations; with ``F`` such
tuples the canonical count is ``(T + F) / 2``.  ``F`` is zero unless the
separation is small compared with the defect budget (steps of a closed
tuple are at most ``6 (k - 2)`` lattice units), and is then found by a
bounded depth-first search.

Tuples themselves are stored up to a cap by depth-first search; every stored
tuple is re-checked with :func:`ap_trace.geometry.is_candidate`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numba as nb
import numpy as np

from ap_trace import _chains
from ap_trace._chains import RADIUS
from ap_trace.errors import BudgetExceeded
from ap_trace.geometry import REL_TOL, APCandidate, APConfig, GridIndex, candidate_mask
from ap_trace.lattice import CellSet

DEFAULT_CAP = 10**6


@dataclass(frozen=True)
class DetectorBudget:
    """Hard limits for one exact count.

    ``max_work`` bounds neighbour checks, ``max_states`` bounds stored pair
    states of one layer.
    """

    max_work: int = 2 * 10**10
    max_states: int = 3 * 10**7


@dataclass
class CountStatistic:
    x_total: int
    k: int
    eps: float
    bucket_counts: dict[int, int]
    tuples: list[APCandidate] = field(default_factory=list)
    d0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kept: int = 0
    work: int = 0

    @property
    def truncated(self) -> bool:
        return self.kept < self.x_total


@dataclass(frozen=True)
class ScaleWindow:
    anchor: APCandidate
    k_scale: int
    band: tuple[float, float]

    @classmethod
    def at(cls, anchor: APCandidate, k_scale: int) -> "ScaleWindow":
        if k_scale < 0:
            raise ValueError("scale must be nonnegative")
        lo = 2.0**k_scale * anchor.eps
        return cls(anchor, k_scale, (lo, 2 * lo))


def _as_cellset(cells, cfg: APConfig) -> CellSet:
    if isinstance(cells, CellSet):
        cs = cells
    else:
        cells = list(cells)
        if cells and not isinstance(cells[0], GridIndex):
            raise TypeError("cells must be a CellSet or GridIndex items")
        cs = CellSet.from_grid_indices(cells, spacing=cfg.spacing if not cells else None, dim=cfg.dim)
    if abs(cs.spacing - cfg.spacing) > REL_TOL * cfg.spacing:
        raise ValueError(f"cell spacing {cs.spacing} does not match eps/3 = {cfg.spacing}")
    if len(cs) and cs.dim != cfg.dim:
        raise ValueError(f"cells have dimension {cs.dim}, config has {cfg.dim}")
    return cs


def _in_domain(cells: np.ndarray, spacing: float, radius: float) -> np.ndarray:
    if len(cells) == 0:
        return cells
    r = np.sqrt(((cells * spacing) ** 2).sum(axis=1))
    return cells[r <= radius * (1 + REL_TOL)]


def sep2_lattice(cfg: APConfig) -> float:
    """Squared separation in lattice units, shaded by the comparison slack."""
    s = cfg.separation / cfg.spacing
    return s * s * (1 - 2 * REL_TOL) if s > 0 else 0.0


def _closure_matrix(k: int) -> np.ndarray:
    """Steps of a closed tuple in terms of its second differences.

    With steps s_1..s_m (m = k - 1) summing to zero and u_j = s_{j+1} - s_j,
    s_i = sum_j C[i, j] u_j with C[i, j] = 1[j < i] - (m - j)/m.
    """
    m = k - 1
    j = np.arange(1, m)
    return np.array([(j < i) - (m - j) / m for i in range(1, m + 1)], dtype=float).reshape(m, m - 1)


def closed_steps(k: int, sep2: float) -> np.ndarray:
    """Upper bounds, in lattice units, on each step of a closed tuple.

    Two bounds are combined.  The triangle inequality gives
    |s_i| <= RADIUS sum_j |C[i, j]|.  For a set S of positions,
    sum_{i in S} |s_i|^2 = sum_{j,l} M[j, l] u_j . u_l with M = C_S^T C_S,
    which is at most RADIUS^2 sum |M|; since every other step in S is at
    least sqrt(sep2), |s_i|^2 <= RADIUS^2 sum |M| - (|S| - 1) sep2.
    A bound below sqrt(sep2) means no closed tuple exists.
    """
    c = _closure_matrix(k)
    m = k - 1
    bound2 = (RADIUS * np.abs(c).sum(axis=1)) ** 2
    for r in range(1, m + 1):
        for sub in itertools.combinations(range(m), r):
            rows = c[list(sub)]
            energy = RADIUS**2 * np.abs(rows.T @ rows).sum()
            for i in sub:
                bound2[i] = min(bound2[i], energy - (r - 1) * sep2)
    return np.sqrt(np.maximum(bound2, 0.0))


def _prepare(cells, cfg: APConfig):
    cs = _as_cellset(cells, cfg)
    pts = _in_domain(cs.cells, cfg.spacing, cfg.domain_radius)
    return _chains.build_index(pts)


def _closed_counts(index, cfg: APConfig, sep2: float, budget: DetectorBudget) -> np.ndarray:
    if cfg.k < 3:
        return np.zeros(index.n_buckets, np.int64)
    steps = closed_steps(cfg.k, sep2)
    if sep2 > (steps.min() ** 2) * (1 + 2 * REL_TOL):
        return np.zeros(index.n_buckets, np.int64)
    counts, _, _ = _chains.dfs(index, cfg.k, sep2, steps=steps, close=True, max_work=budget.max_work)
    return counts


def enumerate_X(cells, cfg: APConfig, cap: int = DEFAULT_CAP, budget: DetectorBudget = DetectorBudget()) -> CountStatistic:
    """All canonical candidate k-tuples of hit cells.

    ``x_total`` and ``bucket_counts`` are exact; at most ``cap`` tuples are
    stored.  Cells outside the domain ball are ignored.
    """
    index = _prepare(cells, cfg)
    sep2 = sep2_lattice(cfg)
    try:
        ordered, work = _chains.count_ordered(index, cfg.k, sep2, budget.max_states, budget.max_work)
        closed = _closed_counts(index, cfg, sep2, budget)
    except _chains.Overrun as e:
        raise BudgetExceeded(e.work if e.status == 1 else e.states,
                             budget.max_work if e.status == 1 else budget.max_states) from None
    both = ordered + closed
    if np.any(both % 2):
        raise AssertionError("ordered and closed counts disagree in parity")
    per_bucket = both // 2
    total = int(per_bucket.sum())
    buckets = {int(i): int(v) for i, v in enumerate(per_bucket) if v}
    stat = CountStatistic(total, cfg.k, cfg.eps, buckets, work=int(work))
    if cap > 0 and total > 0:
        _, stored, _ = _chains.dfs(index, cfg.k, sep2, canonical_only=True, cap=min(cap, total))
        pts = index.cells[stored] * cfg.spacing
        ok = candidate_mask(pts, cfg)
        if not ok.all():
            bad = pts[~ok][0]
            raise AssertionError(f"emitted tuple fails is_candidate: {bad.tolist()}")
        gaps = np.sqrt((np.diff(pts, axis=1) ** 2).sum(axis=-1)).min(axis=1)
        if cfg.k >= 3:
            second = pts[:, :-2] + pts[:, 2:] - 2.0 * pts[:, 1:-1]
            defect = np.sqrt((second**2).sum(axis=-1)).max(axis=1)
        else:
            defect = np.zeros(len(pts))
        stat.tuples = [APCandidate(p, cfg.eps, float(df), float(g)) for p, df, g in zip(pts, defect, gaps)]
        stat.kept = len(stat.tuples)
        stat.d0 = np.sqrt((pts**2).sum(axis=-1)).min(axis=1)
    return stat


@dataclass(frozen=True)
class CountBounds:
    """``lo <= X <= hi``; equal when the closed tuples were counted."""

    lo: int
    hi: int
    ordered: int
    closed: int | None
    work: int

    @property
    def exact(self) -> bool:
        return self.lo == self.hi


def count_bounds(cells, cfg: APConfig, budget: DetectorBudget = DetectorBudget(),
                 closed_work: int | None = None) -> CountBounds:
    """Bracket X when the closed-tuple search may be too expensive.

    The ordered count T is always computed.  The closed count F is attempted
    with ``closed_work`` neighbour checks (default ``budget.max_work``); if
    that runs out, 0 <= F <= T and F = T (mod 2) give
    ceil(T/2) <= X <= T.
    """
    index = _prepare(cells, cfg)
    sep2 = sep2_lattice(cfg)
    try:
        ordered, work = _chains.count_ordered(index, cfg.k, sep2, budget.max_states, budget.max_work)
    except _chains.Overrun as e:
        raise BudgetExceeded(e.work if e.status == 1 else e.states,
                             budget.max_work if e.status == 1 else budget.max_states) from None
    t = int(ordered.sum())
    limit = budget.max_work if closed_work is None else closed_work
    try:
        f = int(_closed_counts(index, cfg, sep2, DetectorBudget(limit, budget.max_states)).sum())
    except _chains.Overrun:
        return CountBounds((t + 1) // 2, t, t, None, int(work))
    return CountBounds((t + f) // 2, (t + f) // 2, t, f, int(work))


def exists_X(cells, cfg: APConfig, budget: DetectorBudget = DetectorBudget()) -> bool:
    """Is there at least one candidate tuple?  Stops at the first one."""
    index = _prepare(cells, cfg)
    try:
        counts, _, _ = _chains.dfs(index, cfg.k, sep2_lattice(cfg), stop_first=True, max_work=budget.max_work)
    except _chains.Overrun as e:
        raise BudgetExceeded(e.work, budget.max_work) from None
    return bool(counts.sum() > 0)


@dataclass(frozen=True)
class CostEstimate:
    n_cells: int
    layer_work: float
    layer_states: float
    layers: int

    @property
    def work(self) -> float:
        return self.layer_work * self.layers

    def fits(self, budget: DetectorBudget) -> bool:
        states_ok = self.layers <= 1 or self.layer_states <= budget.max_states
        return self.work <= budget.max_work and states_ok


def estimate_cost(cells, cfg: APConfig, sample: int = 64) -> CostEstimate:
    """Projected cost of :func:`enumerate_X` from a sample of middle cells.

    Later layers are assumed to cost about as much as the first one, which
    is what typical hit sets show; the figure is a gate, not a promise.
    """
    index = _prepare(cells, cfg)
    work, states = _chains.pilot_first_layer(index, sep2_lattice(cfg), sample)
    return CostEstimate(index.n, work, states, max(cfg.k - 2, 1))


def bucket_of(d0: float, eps: float) -> int:
    """Band n with eps 2**n < d0 <= eps 2**(n+1); band 0 also takes d0 <= eps."""
    if d0 <= 2 * eps * (1 + REL_TOL):
        return 0
    n = max(int(math.floor(math.log2(d0 / eps))) - 1, 1)
    while d0 > eps * 2.0 ** (n + 1) * (1 + REL_TOL):
        n += 1
    while n > 1 and d0 <= eps * 2.0**n * (1 + REL_TOL):
        n -= 1
    return n


def bucketize(stat: CountStatistic, eps: float) -> dict[int, int]:
    if stat.truncated or len(stat.d0) != stat.x_total:
        raise ValueError("bucketize needs every tuple's d0; the statistic is truncated")
    out: dict[int, int] = {}
    for v in stat.d0:
        n = bucket_of(float(v), eps)
        out[n] = out.get(n, 0) + 1
    return out


def _anchor_cells(anchor: APCandidate, cfg: APConfig) -> np.ndarray:
    pts = np.asarray(anchor.points, dtype=float)
    if pts.shape != (cfg.k, cfg.dim):
        raise ValueError("anchor shape does not match config")
    if np.any(np.sqrt((pts**2).sum(axis=1)) > cfg.domain_radius * (1 + REL_TOL)):
        raise ValueError("anchor outside domain")
    lat = np.floor(pts / cfg.spacing + 0.5).astype(np.int64)
    if np.abs(lat * cfg.spacing - pts).max() > 1e-6 * cfg.spacing:
        raise ValueError("anchor points are not lattice centres at spacing eps/3")
    return lat


def default_scales(cfg: APConfig) -> list[int]:
    return list(range(1, int(math.floor(abs(math.log2(cfg.eps)))) + 1))


def _window_masks(index, anchor_lat: np.ndarray, k_scale: int) -> np.ndarray:
    lo = 9 * 4**k_scale  # (2^k eps / (eps/3))**2
    hi = 4 * lo
    diff = index.cells[None, :, :] - anchor_lat[:, None, :]
    g = (diff**2).sum(axis=-1)
    return (g >= lo) & (g < hi)


def window_counts(cells, anchor: APCandidate, cfg: APConfig, scales: Iterable[int] | None = None,
                  budget: DetectorBudget = DetectorBudget()) -> dict[int, int]:
    """X_k per scale: candidate tuples y with 2^k eps <= |y_i - x_i| < 2^(k+1) eps for all i.

    ``y`` is taken in canonical orientation and compared position by
    position with the anchor.  The default scales are 1 .. floor(|log2 eps|).
    """
    return _windows(cells, anchor, cfg, scales, budget, stop_first=False)


def window_indicators(cells, anchor: APCandidate, cfg: APConfig, scales: Iterable[int] | None = None,
                      budget: DetectorBudget = DetectorBudget()) -> dict[int, bool]:
    """1{X_k > 0} per scale, with early exit."""
    return {k: v > 0 for k, v in _windows(cells, anchor, cfg, scales, budget, stop_first=True).items()}


def _windows(cells, anchor, cfg, scales, budget, stop_first):
    lat = _anchor_cells(anchor, cfg)
    index = _prepare(cells, cfg)
    sep2 = sep2_lattice(cfg)
    out = {}
    for ks in default_scales(cfg) if scales is None else scales:
        masks = _window_masks(index, lat, ks)
        try:
            counts, _, _ = _chains.dfs(index, cfg.k, sep2, masks=np.ascontiguousarray(masks), canonical_only=True,
                                       stop_first=stop_first, max_work=budget.max_work)
        except _chains.Overrun as e:
            raise BudgetExceeded(e.work, budget.max_work) from None
        out[int(ks)] = int(counts.sum())
    return out


# ---------------------------------------------------------------------------
# exact 3-APs in lattice ranges


@nb.njit(cache=True)
def _count_3aps(keys_sorted, sites, lo, radix):
    n = sites.shape[0]
    d = sites.shape[1]
    total = 0
    mid = np.empty(d, np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            ok = True
            for t in range(d):
                s = sites[i, t] + sites[j, t]
                if s & 1:
                    ok = False
                    break
                mid[t] = s >> 1
            if not ok:
                continue
            key = 0
            for t in range(d):
                key += (mid[t] - lo[t]) * radix[t]
            p = np.searchsorted(keys_sorted, key)
            if p < keys_sorted.shape[0] and keys_sorted[p] == key:
                total += 1
    return total


def count_3aps_exact(range_set) -> int:
    """Unordered {x, y, z} in the range with y - x = z - y != 0.

    For each pair x < z with x + z even in every coordinate, look up the
    midpoint; sites are distinct so the midpoint differs from both ends.
    """
    sites = range_set.sites if hasattr(range_set, "sites") else np.asarray(range_set, dtype=np.int64)
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[:, None]
    if len(sites) < 3:
        return 0
    sites = np.unique(sites, axis=0)
    lo = sites.min(axis=0)
    ext = sites.max(axis=0) - lo + 1
    radix = np.ones(sites.shape[1], dtype=np.int64)
    for i in range(sites.shape[1] - 2, -1, -1):
        radix[i] = radix[i + 1] * ext[i + 1]
    keys = np.sort(((sites - lo) * radix).sum(axis=1))
    return int(_count_3aps(keys, np.ascontiguousarray(sites), lo, radix))
