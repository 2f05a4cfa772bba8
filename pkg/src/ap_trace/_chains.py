"""Numba kernels for counting approximate progressions on the eps/3 lattice.

Everything here works in integer lattice units (spacing eps/3), where the
defect bound 4 eps becomes the constant 12 and the separation bound becomes
``S = 3 delta / eps - 6``.  Cells are referred to by their row in the
index's ``(N, d)`` array, which is stored bucket by bucket.

Counting uses a layered dynamic programme over ordered pair states
``(x_{i-1}, x_i)``: the weight of a state is the number of valid prefixes
ending in that pair, split by the minimum distance bucket seen so far.
States are grouped by their last element ``b`` so that all transitions out of
``b`` accumulate into one dense row per successor ``c`` before being emitted
as new states ``(b, c)``.  The successors of ``(a, b)`` are the cells within
12 of the reflection ``2b - a``, found through a bucket grid.

A depth-first search with the same successor rule handles the cases that need
the whole tuple: existence with early exit, storing tuples, tuples whose
first and last points coincide, and per-position cell restrictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

DEFECT2 = 144  # (4 eps / (eps/3))**2
RADIUS = 12
GRID = 4
REACH = 3  # buckets of side GRID spanned by RADIUS
HALF2 = 51  # (RADIUS/2 + sqrt(5)/2)**2 rounded up: midpoint ball after flooring


@dataclass
class ChainIndex:
    cells: np.ndarray  # (N, d) int64, grouped by bucket
    bkt: np.ndarray  # (N,) distance bucket of each cell
    n_buckets: int
    blo: np.ndarray  # bucket-grid origin (padded by REACH buckets)
    bext: np.ndarray  # bucket-grid extents
    bstart: np.ndarray  # bucket q holds cells bstart[q] .. bstart[q+1]-1
    dil: np.ndarray  # some occupied bucket within REACH steps per axis

    @property
    def n(self) -> int:
        return len(self.cells)


def distance_buckets(norm2: np.ndarray) -> np.ndarray:
    """Bucket n such that 9 4**n < |c|^2 <= 9 4**(n+1); bucket 0 also takes |c|^2 <= 36."""
    norm2 = np.asarray(norm2, dtype=np.int64)
    out = np.zeros(len(norm2), dtype=np.int64)
    bound = 36
    n = 0
    while True:
        above = norm2 > bound
        if not above.any():
            return out
        n += 1
        out[above] = n
        bound *= 4


def build_index(cells: np.ndarray) -> ChainIndex:
    """Index cells on a bucket grid of side GRID.

    Cells are reordered so that each bucket is a contiguous slice; within a
    bucket they stay in lexicographic order.  The order is a pure function of
    the cell set.
    """
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    n, d = cells.shape
    if n == 0:
        z = np.zeros(d, dtype=np.int64)
        return ChainIndex(cells, np.zeros(0, np.int64), 1, z, z + 1, np.zeros(2, np.int64), np.zeros(1, np.bool_))
    cells = np.unique(cells, axis=0)
    bc = cells // GRID
    blo = bc.min(axis=0) - REACH
    bext = bc.max(axis=0) - blo + 1 + REACH
    n_cells = float(np.prod(bext.astype(float)))
    if n_cells > 6e7:
        raise MemoryError(f"bucket grid of {n_cells:.3g} buckets is too large")
    radix = np.ones(d, dtype=np.int64)
    for i in range(d - 2, -1, -1):
        radix[i] = radix[i + 1] * bext[i + 1]
    bid = ((bc - blo) * radix).sum(axis=1)
    order = np.argsort(bid, kind="stable")
    cells = np.ascontiguousarray(cells[order])
    bid = bid[order]
    bkt = distance_buckets((cells**2).sum(axis=1))
    counts = np.bincount(bid, minlength=int(n_cells))
    start = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    occ = (counts > 0).reshape(tuple(bext))
    dil = occ.copy()
    for axis in range(d):
        for _ in range(REACH):
            grown = dil.copy()
            grown[(slice(None),) * axis + (slice(1, None),)] |= dil[(slice(None),) * axis + (slice(None, -1),)]
            grown[(slice(None),) * axis + (slice(None, -1),)] |= dil[(slice(None),) * axis + (slice(1, None),)]
            dil = grown
    return ChainIndex(cells, bkt, int(bkt.max()) + 1, blo, bext, start, dil.ravel())


@nb.njit(cache=True)
def _bucket_of(y, blo, bext):
    """Linear bucket id of point y, or -1 when outside the padded grid.

    The grid is padded by REACH buckets, so a point outside it has no cell
    within RADIUS.
    """
    d = y.shape[0]
    lin = 0
    for i in range(d):
        q = y[i] // GRID - blo[i]
        if q < 0 or q >= bext[i]:
            return -1
        lin = lin * bext[i] + q
    return lin


@nb.njit(cache=True)
def _probe(y, rad2, cells, blo, bext, bstart, out):
    """Ids of cells within sqrt(rad2) of y (rad2 <= RADIUS**2). Returns (count, scanned).

    Buckets whose box lies entirely outside the ball are skipped.
    """
    d = y.shape[0]
    lo = np.empty(d, np.int64)
    hi = np.empty(d, np.int64)
    cur = np.empty(d, np.int64)
    r = int(np.sqrt(rad2)) + 1
    if r > RADIUS:
        r = RADIUS
    for i in range(d):
        lo[i] = max((y[i] - r) // GRID - blo[i], 0)
        hi[i] = min((y[i] + r) // GRID - blo[i], bext[i] - 1)
        if lo[i] > hi[i]:
            return 0, 0
        cur[i] = lo[i]
    m = 0
    scanned = 0
    while True:
        lin = 0
        near = 0
        for i in range(d):
            lin = lin * bext[i] + cur[i]
            left = (cur[i] + blo[i]) * GRID
            g = left - y[i]
            if g < 0:
                g = y[i] - (left + GRID - 1)
                if g < 0:
                    g = 0
            near += g * g
        if near <= rad2:
            for c in range(bstart[lin], bstart[lin + 1]):
                scanned += 1
                s = 0
                for i in range(d):
                    w = cells[c, i] - y[i]
                    s += w * w
                if s <= rad2:
                    out[m] = c
                    m += 1
        i = d - 1
        while i >= 0:
            cur[i] += 1
            if cur[i] <= hi[i]:
                break
            cur[i] = lo[i]
            i -= 1
        if i < 0:
            return m, scanned


@nb.njit(cache=True)
def _dist2(cells, a, b):
    s = 0
    for i in range(cells.shape[1]):
        w = cells[a, i] - cells[b, i]
        s += w * w
    return s


@nb.njit(cache=True)
def _layer(first, cells, bkt, n_b, sep2, blo, bext, bstart, dil,
           s_first, s_w, g_start, middles, final, max_states, max_work):
    """One DP transition.

    ``first``: incoming states are all separated ordered pairs (a, b),
    implicit.  Otherwise states (a, b) are given grouped by b via g_start.
    Only middles listed in ``middles`` are processed (all of them for exact
    counts, a sample for cost estimates).

    Returns (status, totals, out_first, out_last, out_w, n_out, work) where
    status is 0 on success, 1 when over max_work, 2 when over max_states.
    """
    n = cells.shape[0]
    d = cells.shape[1]
    acc = np.zeros((n, n_b), np.int64)
    is_t = np.zeros(n, np.bool_)
    touched = np.empty(n, np.int64)
    cand = np.empty(n, np.int64)
    totals = np.zeros(n_b, np.int64)
    cap = 1024
    out_first = np.empty(cap, np.int64)
    out_last = np.empty(cap, np.int64)
    out_w = np.empty((cap, n_b), np.int64)
    n_out = 0
    work = 0
    y = np.empty(d, np.int64)
    yy = np.empty(d, np.int64)
    w = np.zeros(n_b, np.int64)
    for bi in range(middles.shape[0]):
        b = middles[bi]
        nt = 0
        if first:
            lo_s, hi_s = 0, n
        else:
            lo_s, hi_s = g_start[b], g_start[b + 1]
        for t in range(lo_s, hi_s):
            if first:
                a = t
                if a == b or _dist2(cells, a, b) < sep2:
                    continue
            else:
                a = s_first[t]
            for i in range(d):
                y[i] = 2 * cells[b, i] - cells[a, i]
            q = _bucket_of(y, blo, bext)
            if q < 0 or not dil[q]:
                continue
            if first:
                for j in range(n_b):
                    w[j] = 0
                w[min(bkt[a], bkt[b])] = 1
            else:
                for j in range(n_b):
                    w[j] = s_w[t, j]
            nc, sc = _probe(y, DEFECT2, cells, blo, bext, bstart, cand)
            work += sc + 1
            for u in range(nc):
                c = cand[u]
                if _dist2(cells, b, c) < sep2:
                    continue
                if not is_t[c]:
                    is_t[c] = True
                    touched[nt] = c
                    nt += 1
                bc = bkt[c]
                for j in range(n_b):
                    if w[j] != 0:
                        acc[c, min(j, bc)] += w[j]
        for u in range(nt):
            c = touched[u]
            if final:
                for j in range(n_b):
                    totals[j] += acc[c, j]
            else:
                keep = True
                for i in range(d):
                    yy[i] = 2 * cells[c, i] - cells[b, i]
                q = _bucket_of(yy, blo, bext)
                if q < 0 or not dil[q]:
                    keep = False
                if keep:
                    if n_out == cap:
                        cap *= 2
                        nf = np.empty(cap, np.int64)
                        nl = np.empty(cap, np.int64)
                        nw = np.empty((cap, n_b), np.int64)
                        nf[:n_out] = out_first[:n_out]
                        nl[:n_out] = out_last[:n_out]
                        nw[:n_out] = out_w[:n_out]
                        out_first, out_last, out_w = nf, nl, nw
                    out_first[n_out] = b
                    out_last[n_out] = c
                    for j in range(n_b):
                        out_w[n_out, j] = acc[c, j]
                    n_out += 1
            for j in range(n_b):
                acc[c, j] = 0
            is_t[c] = False
        if work > max_work:
            return 1, totals, out_first[:n_out], out_last[:n_out], out_w[:n_out], n_out, work
        if n_out > max_states:
            return 2, totals, out_first[:n_out], out_last[:n_out], out_w[:n_out], n_out, work
    return 0, totals, out_first[:n_out], out_last[:n_out], out_w[:n_out], n_out, work


@nb.njit(cache=True)
def _group_by_last(n, out_first, out_last, out_w):
    """Counting sort of states by their last element."""
    m = out_last.shape[0]
    counts = np.zeros(n + 1, np.int64)
    for t in range(m):
        counts[out_last[t] + 1] += 1
    for i in range(n):
        counts[i + 1] += counts[i]
    pos = counts[:-1].copy()
    sf = np.empty(m, np.int64)
    sw = np.empty_like(out_w)
    for t in range(m):
        c = out_last[t]
        p = pos[c]
        sf[p] = out_first[t]
        sw[p] = out_w[t]
        pos[c] += 1
    return sf, sw, counts


@nb.njit(cache=True)
def _pairs(cells, bkt, n_b, sep2):
    """Ordered separated pairs per bucket (the whole story for k = 2)."""
    n = cells.shape[0]
    totals = np.zeros(n_b, np.int64)
    for a in range(n):
        for b in range(n):
            if a != b and _dist2(cells, a, b) >= sep2:
                totals[min(bkt[a], bkt[b])] += 1
    return totals


class Overrun(Exception):
    def __init__(self, status: int, work: int, states: int):
        self.status, self.work, self.states = status, work, states
        super().__init__(f"status {status}: work {work}, states {states}")


def count_ordered(index: ChainIndex, k: int, sep2: float, max_states: int, max_work: int) -> tuple[np.ndarray, int]:
    """Ordered tuple counts per distance bucket, plus the work spent."""
    n = index.n
    n_b = index.n_buckets
    if n == 0:
        return np.zeros(n_b, np.int64), 0
    if k == 2:
        return _pairs(index.cells, index.bkt, n_b, sep2), n * n
    middles = np.arange(n, dtype=np.int64)
    empty_i = np.zeros(0, np.int64)
    empty_w = np.zeros((0, n_b), np.int64)
    sf, sw, gs = empty_i, empty_w, np.zeros(n + 1, np.int64)
    total_work = 0
    for layer in range(k - 2):
        first = layer == 0
        final = layer == k - 3
        status, totals, of, ol, ow, n_out, work = _layer(
            first, index.cells, index.bkt, n_b, sep2, index.blo, index.bext, index.bstart,
            index.dil, sf, sw, gs, middles, final, max_states, max_work - total_work,
        )
        total_work += work
        if status:
            raise Overrun(status, total_work, n_out)
        if final:
            return totals, total_work
        sf, sw, gs = _group_by_last(n, of, ol, ow)
    raise AssertionError("unreachable")


def pilot_first_layer(index: ChainIndex, sep2: float, sample: int) -> tuple[float, float]:
    """Projected (work, states) of the first DP layer from evenly spaced middles."""
    n = index.n
    if n == 0:
        return 0.0, 0.0
    m = min(n, sample)
    middles = np.unique(np.linspace(0, n - 1, m).round().astype(np.int64))
    status, _, _, _, _, n_out, work = _layer(
        True, index.cells, index.bkt, index.n_buckets, sep2, index.blo, index.bext, index.bstart,
        index.dil, np.zeros(0, np.int64), np.zeros((0, index.n_buckets), np.int64), np.zeros(n + 1, np.int64),
        middles, False, np.iinfo(np.int64).max, np.iinfo(np.int64).max,
    )
    scale = n / len(middles)
    return work * scale, n_out * scale


@nb.njit(cache=True)
def _lex_leq(cells, a, b):
    for i in range(cells.shape[1]):
        if cells[a, i] < cells[b, i]:
            return True
        if cells[a, i] > cells[b, i]:
            return False
    return True


@nb.njit(cache=True)
def _can_close(cells, b, e, first, r):
    """Can r more steps after the step b -> e end at ``first``?

    Each later step differs from the previous one by at most RADIUS, so the
    end point lies within RADIUS * r (r + 1) / 2 of the straight
    continuation e + r (e - b).
    """
    s = 0
    for i in range(cells.shape[1]):
        v = (r + 1) * cells[e, i] - r * cells[b, i] - cells[first, i]
        s += v * v
    lim = RADIUS * r * (r + 1) // 2
    return s <= lim * lim


@nb.njit(cache=True)
def _dfs(cells, bkt, n_b, k, sep2, steps2, back2, masks, close, canonical_only,
         blo, bext, bstart, dil, cap, stop_first, max_work):
    """Enumerate ordered tuples depth first.

    masks[i, c] says whether cell c may sit at position i.  ``close`` keeps
    only tuples whose last point equals the first; ``canonical_only`` keeps
    only first <=lex last.  ``steps2[i]`` bounds the squared step from
    position i to i + 1 and ``back2[i]`` the squared distance from position i
    back to the first point; empty arrays mean no bounds.

    Returns (status, counts per bucket, stored tuples, n_stored, work).
    """
    n = cells.shape[0]
    d = cells.shape[1]
    counts = np.zeros(n_b, np.int64)
    stored = np.empty((max(cap, 1), k), np.int64)
    n_stored = 0
    work = 0
    chain = np.empty(k, np.int64)
    minb = np.empty(k, np.int64)
    cand = np.empty((k, n), np.int64)
    ncand = np.zeros(k, np.int64)
    ptr = np.zeros(k, np.int64)
    buf = np.empty(n, np.int64)
    y = np.empty(d, np.int64)
    bounded = steps2.shape[0] > 0
    m0 = 0
    for c in range(n):
        if masks[0, c]:
            cand[0, m0] = c
            m0 += 1
    ncand[0] = m0
    ptr[0] = 0
    depth = 0
    while depth >= 0:
        if ptr[depth] >= ncand[depth]:
            depth -= 1
            continue
        c = cand[depth, ptr[depth]]
        ptr[depth] += 1
        chain[depth] = c
        minb[depth] = bkt[c] if depth == 0 else min(minb[depth - 1], bkt[c])
        if depth == k - 1:
            if close and c != chain[0]:
                continue
            if canonical_only and not _lex_leq(cells, chain[0], c):
                continue
            counts[minb[depth]] += 1
            if n_stored < cap:
                for i in range(k):
                    stored[n_stored, i] = chain[i]
                n_stored += 1
            if stop_first:
                return 0, counts, stored[:n_stored], n_stored, work
            continue
        # build the candidate list for depth + 1
        nxt = depth + 1
        m = 0
        if depth == 0:
            a = c
            for e in range(n):
                work += 1
                if not masks[1, e]:
                    continue
                g = _dist2(cells, a, e)
                if g < sep2 or (bounded and (g > steps2[0] or g > back2[1])):
                    continue
                if close and not _can_close(cells, a, e, chain[0], k - 2):
                    continue
                if k > 2:
                    for i in range(d):
                        y[i] = 2 * cells[e, i] - cells[a, i]
                    q = _bucket_of(y, blo, bext)
                    if q < 0 or not dil[q]:
                        continue
                cand[nxt, m] = e
                m += 1
        elif close and nxt == k - 1:
            # the last point is forced to be the first one
            a = chain[depth - 1]
            b = c
            e = chain[0]
            work += 1
            if masks[nxt, e]:
                g = _dist2(cells, b, e)
                s = 0
                for i in range(d):
                    v = 2 * cells[b, i] - cells[a, i] - cells[e, i]
                    s += v * v
                if s <= DEFECT2 and g >= sep2 and (not bounded or g <= steps2[nxt - 1]):
                    cand[nxt, m] = e
                    m += 1
        else:
            a = chain[depth - 1]
            b = c
            for i in range(d):
                y[i] = 2 * cells[b, i] - cells[a, i]
            if close and nxt == k - 2:
                # e must also be within RADIUS/2 of the midpoint of b and the
                # first point; probe the smaller ball around it
                for i in range(d):
                    y[i] = (cells[b, i] + cells[chain[0], i]) // 2
                nc, sc = _probe(y, HALF2, cells, blo, bext, bstart, buf)
            else:
                nc, sc = _probe(y, DEFECT2, cells, blo, bext, bstart, buf)
            work += sc + 1
            for u in range(nc):
                e = buf[u]
                if not masks[nxt, e]:
                    continue
                if close and nxt == k - 2:
                    s = 0
                    s2 = 0
                    for i in range(d):
                        v = 2 * cells[b, i] - cells[a, i] - cells[e, i]
                        s += v * v
                        v = cells[b, i] + cells[chain[0], i] - 2 * cells[e, i]
                        s2 += v * v
                    if s > DEFECT2 or s2 > DEFECT2:
                        continue
                g = _dist2(cells, b, e)
                if g < sep2 or (bounded and (g > steps2[nxt - 1] or _dist2(cells, e, chain[0]) > back2[nxt])):
                    continue
                if close and not _can_close(cells, b, e, chain[0], k - 1 - nxt):
                    continue
                cand[nxt, m] = e
                m += 1
        ncand[nxt] = m
        ptr[nxt] = 0
        depth = nxt
        if work > max_work:
            return 1, counts, stored[:n_stored], n_stored, work
    return 0, counts, stored[:n_stored], n_stored, work


def dfs(index: ChainIndex, k: int, sep2: float, *, masks: np.ndarray | None = None, steps: np.ndarray | None = None,
        close: bool = False, canonical_only: bool = False, cap: int = 0, stop_first: bool = False,
        max_work: int = np.iinfo(np.int64).max):
    n = index.n
    if masks is None:
        masks = np.ones((k, n), dtype=np.bool_)
    if n == 0:
        return np.zeros(index.n_buckets, np.int64), np.zeros((0, k), np.int64), 0
    if steps is None:
        steps2 = back2 = np.zeros(0)
    else:
        steps = np.asarray(steps, dtype=float)
        back = np.concatenate([np.cumsum(steps[::-1])[::-1], [0.0]])
        slack = 1 + 1e-9
        steps2, back2 = steps**2 * slack, back**2 * slack
    status, counts, stored, n_stored, work = _dfs(
        index.cells, index.bkt, index.n_buckets, k, float(sep2), steps2, back2, masks, close, canonical_only,
        index.blo, index.bext, index.bstart, index.dil, int(cap), stop_first, int(max_work),
    )
    if status:
        raise Overrun(status, work, n_stored)
    return counts, stored, work
