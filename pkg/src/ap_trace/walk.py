"""Simple random walk on Z^d and its range."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from ap_trace.rng import stream


@dataclass
class LatticeWalk:
    steps: np.ndarray  # (n,) move codes: 2*i for +e_i, 2*i + 1 for -e_i
    sites: np.ndarray  # (n + 1, d) int64, sites[0] = origin
    seed: int
    index: int = 0

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def dim(self) -> int:
        return self.sites.shape[1]


@dataclass
class RangeSet:
    sites: np.ndarray  # distinct sites, lexicographically sorted
    n: int
    d: int

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site) -> bool:
        return tuple(int(v) for v in np.atleast_1d(site)) in self.as_set()

    def as_set(self) -> set[tuple[int, ...]]:
        if not hasattr(self, "_set"):
            self._set = {tuple(int(v) for v in row) for row in self.sites}
        return self._set


def _moves(d: int) -> np.ndarray:
    mv = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        mv[2 * i, i] = 1
        mv[2 * i + 1, i] = -1
    return mv


def walk_codes(d: int, n: int, seed: int, index: int = 0) -> np.ndarray:
    return stream(seed, "walk", d, index).integers(0, 2 * d, size=n, dtype=np.int64)


def sites_from_codes(codes: np.ndarray, d: int) -> np.ndarray:
    sites = np.zeros((len(codes) + 1, d), dtype=np.int64)
    if len(codes):
        np.cumsum(_moves(d)[codes], axis=0, out=sites[1:])
    return sites


def sample_walk(d: int, n: int, seed: int, index: int = 0, reflect: bool = False) -> LatticeWalk:
    """n uniform +-e_i steps from the origin.

    ``reflect=True`` reverses every step of the same draw, giving the
    pointwise negated walk.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if d < 1:
        raise ValueError("d must be positive")
    codes = walk_codes(d, n, seed, index)
    if reflect:
        codes = codes ^ 1
    return LatticeWalk(codes, sites_from_codes(codes, d), seed, index)


def range_of(walk: LatticeWalk) -> RangeSet:
    return RangeSet(np.unique(walk.sites, axis=0), walk.n, walk.dim)


def range_size(d: int, n: int, seed: int, index: int = 0) -> int:
    """|range| without keeping the walk; packs sites into integer keys."""
    sites = sites_from_codes(walk_codes(d, n, seed, index), d)
    lo = sites.min(axis=0)
    ext = sites.max(axis=0) - lo + 1
    radix = np.cumprod(np.concatenate([[1], ext[:0:-1]]))[::-1]
    return int(len(np.unique(((sites - lo) * radix).sum(axis=1))))


@nb.njit(cache=True)
def _block_counts(codes, moves, out):
    """3-AP count of the range of each walk (rows of codes)."""
    n_w, n = codes.shape
    d = moves.shape[1]
    sites = np.zeros((n + 1, d), np.int64)
    keys = np.empty(n + 1, np.int64)
    span = 2 * n + 1
    for w in range(n_w):
        for t in range(d):
            sites[0, t] = 0
        for s in range(n):
            for t in range(d):
                sites[s + 1, t] = sites[s, t] + moves[codes[w, s], t]
        for s in range(n + 1):
            key = 0
            for t in range(d):
                key = key * span + sites[s, t] + n
            keys[s] = key
        ks = np.unique(keys)
        m = ks.shape[0]
        pts = np.empty((m, d), np.int64)
        for s in range(m):
            rem = ks[s]
            for t in range(d - 1, -1, -1):
                pts[s, t] = rem % span - n
                rem //= span
        total = 0
        for i in range(m):
            for j in range(i + 1, m):
                key = 0
                ok = True
                for t in range(d):
                    v = pts[i, t] + pts[j, t]
                    if v & 1:
                        ok = False
                        break
                    key = key * span + (v >> 1) + n
                if ok:
                    p = np.searchsorted(ks, key)
                    if p < m and ks[p] == key:
                        total += 1
        out[w] = total


def block_3ap_counts(d: int, n: int, seed: int, block: int, size: int) -> np.ndarray:
    """3-AP counts for walks ``block*size .. block*size + size - 1``.

    A block draws its steps from one stream keyed by the block number, so
    results do not depend on how blocks are spread over workers.
    """
    codes = stream(seed, "walk-block", d, n, block).integers(0, 2 * d, size=(size, n), dtype=np.int64)
    out = np.zeros(size, dtype=np.int64)
    if n > 0:
        _block_counts(codes, _moves(d), out)
    return out
