"""Integer lattice helpers: packed keys and cell sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ap_trace.geometry import REL_TOL, GridIndex


class KeyCodec:
    """Packs integer coordinate rows inside a bounding box into int64 keys."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.extent = np.asarray(hi, dtype=np.int64) - self.lo + 1
        if np.prod(self.extent.astype(float)) >= 2.0**62:
            raise OverflowError("lattice box too large for 64-bit keys")
        radix = np.ones(len(self.extent), dtype=np.int64)
        for i in range(len(self.extent) - 2, -1, -1):
            radix[i] = radix[i + 1] * self.extent[i + 1]
        self.radix = radix

    @classmethod
    def covering(cls, *arrays: np.ndarray, pad: int = 0) -> "KeyCodec":
        stacked = np.vstack([a for a in arrays if len(a)])
        return cls(stacked.min(axis=0) - pad, stacked.max(axis=0) + pad)

    def encode(self, cells: np.ndarray) -> np.ndarray:
        return ((np.asarray(cells, dtype=np.int64) - self.lo) * self.radix).sum(axis=1)

    def decode(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        out = np.empty((len(keys), len(self.lo)), dtype=np.int64)
        rem = keys.copy()
        for i, r in enumerate(self.radix):
            out[:, i] = rem // r
            rem -= out[:, i] * r
        return out + self.lo


def unique_rows(cells: np.ndarray) -> np.ndarray:
    """Lexicographically sorted unique rows of an integer array."""
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) == 0:
        return cells.reshape(0, cells.shape[1] if cells.ndim == 2 else 0)
    return np.unique(cells, axis=0)


@dataclass
class CellSet:
    """A set of lattice cells at a fixed spacing.

    ``cells`` holds unique integer rows in lexicographic order; the centre of
    a cell is ``spacing * cell``.
    """

    cells: np.ndarray
    spacing: float

    def __post_init__(self):
        arr = np.asarray(self.cells, dtype=np.int64)
        if arr.ndim != 2:
            raise ValueError("cells must be a (n, d) array")
        self.cells = unique_rows(arr)

    @classmethod
    def from_grid_indices(cls, items: Iterable[GridIndex], spacing: float | None = None, dim: int | None = None):
        items = list(items)
        if not items:
            if spacing is None:
                raise ValueError("spacing required for an empty cell set")
            return cls(np.zeros((0, dim or 0), dtype=np.int64), spacing)
        sp = items[0].spacing if spacing is None else spacing
        for g in items:
            if abs(g.spacing - sp) > REL_TOL * sp:
                raise ValueError("cells carry different spacings")
        return cls(np.array([g.cell for g in items], dtype=np.int64), sp)

    @classmethod
    def empty(cls, dim: int, spacing: float) -> "CellSet":
        return cls(np.zeros((0, dim), dtype=np.int64), spacing)

    @property
    def dim(self) -> int:
        return self.cells.shape[1]

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self):
        for row in self.cells:
            yield GridIndex(tuple(int(v) for v in row), self.spacing)

    def __contains__(self, item) -> bool:
        cell = item.cell if isinstance(item, GridIndex) else tuple(item)
        if len(self.cells) == 0:
            return False
        return bool(np.any(np.all(self.cells == np.asarray(cell), axis=1)))

    def as_set(self) -> set[tuple[int, ...]]:
        return {tuple(int(v) for v in row) for row in self.cells}

    def centers(self) -> np.ndarray:
        return self.cells * self.spacing

    def union(self, other: "CellSet") -> "CellSet":
        if abs(other.spacing - self.spacing) > REL_TOL * self.spacing:
            raise ValueError("spacing mismatch")
        return CellSet(np.vstack([self.cells, other.cells]), self.spacing)


def coarsen(cells: CellSet, spacing: float, domain_radius: float | None = None) -> CellSet:
    """Re-snap cell centres onto a coarser lattice.

    Each centre goes to its nearest coarse cell.  When that cell falls outside
    the closed domain ball the coordinates are instead truncated toward zero,
    which never increases the norm.  Either way the move is at most
    ``spacing * sqrt(d)``.
    """
    pts = cells.centers()
    near = np.floor(pts / spacing + 0.5).astype(np.int64)
    if domain_radius is not None and len(near):
        out = (near * spacing) ** 2
        bad = out.sum(axis=1) > domain_radius**2 * (1 + REL_TOL)
        near[bad] = np.trunc(pts[bad] / spacing).astype(np.int64)
    return CellSet(near, spacing)
