"""Points, lattice cells and the approximate-progression predicates.

Coordinates are plain ``numpy`` arrays; a tuple of ``k`` points is a ``(k, d)``
array.  All inequalities are closed.  Floating comparisons carry a relative
slack of ``REL_TOL`` so that lattice configurations sitting exactly on a
threshold (common: centres are integer multiples of ``eps/3``) are accepted
regardless of rounding in ``eps/3 * n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REL_TOL = 1e-9
MAX_DIM = 5


def _leq(a: float, b: float) -> bool:
    return a <= b + REL_TOL * max(abs(b), 1e-300)


def _geq(a: float, b: float) -> bool:
    return a >= b - REL_TOL * max(abs(b), 1e-300)


def as_points(points) -> np.ndarray:
    """Stack ``points`` into a ``(k, d)`` float array, rejecting ragged input."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        rows = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
        if not rows:
            return np.zeros((0, 0))
        dims = {r.shape for r in rows}
        if len(dims) != 1 or rows[0].ndim != 1:
            raise ValueError(f"dimension mismatch among points: {sorted(d for d in dims)}")
        arr = np.stack(rows)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("points must form a (k, d) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must have finite coordinates")
    return arr


def ap_defect(points) -> float:
    """max over interior i of |x[i-1] + x[i+1] - 2 x[i]|."""
    pts = as_points(points)
    if len(pts) < 3:
        raise ValueError("ap_defect needs at least 3 points")
    second = pts[:-2] + pts[2:] - 2.0 * pts[1:-1]
    return float(np.sqrt((second**2).sum(axis=1)).max())


def min_gap(points) -> float:
    pts = as_points(points)
    if len(pts) < 2:
        raise ValueError("min_gap needs at least 2 points")
    return float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1)).min())


def is_canonical(points) -> bool:
    """First point lexicographically <= last point."""
    pts = as_points(points)
    return tuple(pts[0]) <= tuple(pts[-1])


def canonical(points) -> np.ndarray:
    pts = as_points(points)
    return pts if is_canonical(pts) else pts[::-1].copy()


@dataclass(frozen=True)
class APConfig:
    k: int
    eps: float
    delta: float
    dim: int = 3
    domain_radius: float = 1.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid APConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        return config_violations(self.k, self.eps, self.delta, self.dim, self.domain_radius)

    @property
    def spacing(self) -> float:
        return self.eps / 3.0

    @property
    def separation(self) -> float:
        """Minimum consecutive gap, delta - 2 eps."""
        return self.delta - 2.0 * self.eps

    @property
    def tolerance(self) -> float:
        """Maximum second difference, 4 eps."""
        return 4.0 * self.eps


def config_violations(k, eps, delta, dim, domain_radius) -> list[str]:
    out = []
    if not isinstance(k, (int, np.integer)) or not 2 <= k <= 8:
        out.append("k must be an integer in 2..8")
    if not isinstance(dim, (int, np.integer)) or not 1 <= dim <= MAX_DIM:
        out.append(f"dim must be an integer in 1..{MAX_DIM}")
    if not (eps > 0 and math.isfinite(eps)):
        out.append("eps must be positive")
    if not (delta > 0 and math.isfinite(delta)):
        out.append("delta must be positive")
    if not (domain_radius > 0 and math.isfinite(domain_radius)):
        out.append("domain_radius must be positive")
    if out:
        return out
    if not eps < delta / 4:
        out.append("eps < delta/4")
    if not delta <= 2 * domain_radius:
        out.append("delta <= 2*domain_radius")
    return out


def is_candidate(points, cfg: APConfig) -> bool:
    """Membership in the candidate set: defect, separation and domain tests."""
    pts = as_points(points)
    if len(pts) != cfg.k:
        raise ValueError(f"expected {cfg.k} points, got {len(pts)}")
    if pts.shape[1] != cfg.dim:
        raise ValueError(f"expected dimension {cfg.dim}, got {pts.shape[1]}")
    if cfg.k >= 3 and not _leq(ap_defect(pts), cfg.tolerance):
        return False
    if not _geq(min_gap(pts), cfg.separation):
        return False
    radii = np.sqrt((pts**2).sum(axis=1))
    return all(_leq(float(r), cfg.domain_radius) for r in radii)


def candidate_mask(tuples: np.ndarray, cfg: APConfig) -> np.ndarray:
    """Vectorised :func:`is_candidate` over a ``(m, k, d)`` stack of tuples."""
    tup = np.asarray(tuples, dtype=float)
    if tup.ndim != 3 or tup.shape[1:] != (cfg.k, cfg.dim):
        raise ValueError(f"expected shape (m, {cfg.k}, {cfg.dim}), got {tup.shape}")
    gaps = np.sqrt((np.diff(tup, axis=1) ** 2).sum(axis=-1)).min(axis=1)
    sep = cfg.separation
    ok = gaps >= sep - REL_TOL * max(abs(sep), 1e-300)
    if cfg.k >= 3:
        second = tup[:, :-2] + tup[:, 2:] - 2.0 * tup[:, 1:-1]
        defect = np.sqrt((second**2).sum(axis=-1)).max(axis=1)
        ok &= defect <= cfg.tolerance * (1 + REL_TOL)
    radii = np.sqrt((tup**2).sum(axis=-1)).max(axis=1)
    ok &= radii <= cfg.domain_radius * (1 + REL_TOL)
    return ok


@dataclass(frozen=True)
class GridIndex:
    cell: tuple[int, ...]
    spacing: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.cell, dtype=float) * self.spacing

    @property
    def dim(self) -> int:
        return len(self.cell)


def snap_to_grid(p, spacing: float) -> GridIndex:
    """Nearest lattice cell, halves rounded up."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    x = np.atleast_1d(np.asarray(p, dtype=float))
    cell = np.floor(x / spacing + 0.5).astype(np.int64)
    return GridIndex(tuple(int(c) for c in cell), float(spacing))


def snap_cells(points: np.ndarray, spacing: float) -> np.ndarray:
    """Vectorised :func:`snap_to_grid` returning an integer ``(n, d)`` array."""
    return np.floor(np.asarray(points, dtype=float) / spacing + 0.5).astype(np.int64)


@dataclass
class APCandidate:
    points: np.ndarray
    eps: float
    defect: float = field(default=0.0)
    min_gap: float = field(default=0.0)

    @classmethod
    def from_points(cls, points, eps: float) -> "APCandidate":
        pts = canonical(points)
        d = ap_defect(pts) if len(pts) >= 3 else 0.0
        return cls(points=pts, eps=eps, defect=d, min_gap=min_gap(pts))

    @property
    def k(self) -> int:
        return len(self.points)

    @property
    def d0(self) -> float:
        """Distance from the origin to the closest point of the tuple."""
        return float(np.sqrt((self.points**2).sum(axis=1)).min())

    def __eq__(self, other):
        if not isinstance(other, APCandidate):
            return NotImplemented
        return self.eps == other.eps and np.array_equal(self.points, other.points)


def points_of(cells: Sequence[GridIndex]) -> np.ndarray:
    return np.stack([c.center for c in cells])
