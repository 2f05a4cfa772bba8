"""Approximate arithmetic progressions in Brownian traces and random-walk ranges."""

from ap_trace.brownian import BallSpec, PathSample, RefinePolicy, hit_cells, hits_ball, sample_path
from ap_trace.detector import CountStatistic, DetectorBudget, count_3aps_exact, enumerate_X, exists_X, window_counts
from ap_trace.errors import BudgetExceeded, ConditioningInfeasible, ManifestError
from ap_trace.geometry import APCandidate, APConfig, GridIndex, ap_defect, is_candidate, snap_to_grid
from ap_trace.lattice import CellSet
from ap_trace.manifest import ExperimentManifest, execute, run, validate
from ap_trace.walk import LatticeWalk, RangeSet, range_of, sample_walk

__all__ = [
    "APCandidate",
    "APConfig",
    "BallSpec",
    "BudgetExceeded",
    "CellSet",
    "ConditioningInfeasible",
    "CountStatistic",
    "DetectorBudget",
    "ExperimentManifest",
    "GridIndex",
    "LatticeWalk",
    "ManifestError",
    "PathSample",
    "RangeSet",
    "RefinePolicy",
    "ap_defect",
    "count_3aps_exact",
    "enumerate_X",
    "execute",
    "exists_X",
    "hit_cells",
    "hits_ball",
    "is_candidate",
    "range_of",
    "run",
    "sample_path",
    "sample_walk",
    "snap_to_grid",
    "validate",
    "window_counts",
]

__version__ = "0.1.0"
