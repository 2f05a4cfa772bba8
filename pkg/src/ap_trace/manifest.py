"""Experiment manifests, validation, and report files.

A report has a hashed region (schema version, manifest, manifest hash,
results) and a ``timing`` block holding wall time and worker count.  The
hashed region depends only on the manifest, so reruns with any worker count
give byte-identical payloads.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from ap_trace import estimators as est
from ap_trace.brownian import RefinePolicy
from ap_trace.detector import DetectorBudget
from ap_trace.errors import BudgetExceeded, ConditioningInfeasible, ManifestError
from ap_trace.geometry import APConfig
from ap_trace.parallel import resolve_workers

SCHEMA_VERSION = 1
SERIES_COLUMNS = ("schema", "kind", "series", "x", "value", "stderr")
KINDS = ("moments", "scaling", "nesting", "covariance", "excursion", "ldp", "oracle")

DEFAULTS: dict[str, dict[str, Any]] = {
    "moments": dict(dim=3, k=6, eps=0.125, delta=0.1, domain_radius=1.0, trials=100, cap=0,
                    horizon=1.0, dt_base=2.0**-10, max_work=2e10),
    "scaling": dict(dim=3, k=5, delta=0.6, domain_radius=1.0, trials=32, cap=0, horizon=1.0,
                    dt_base=2.0**-10, ladder=[0.125, 0.0625, 0.03125, 0.015625], statistic="mean_X",
                    max_work=2e10, max_total_work=1e13),
    "nesting": dict(dim=3, k=3, eps=0.0625, delta=0.6, lam=0.25, domain_radius=1.0, trials=1000,
                    horizon=1.0, dt_base=2.0**-10),
    "covariance": dict(dim=3, k=3, eps=0.125, delta=0.6, domain_radius=3.0, trials=20000,
                       anchor=[[-0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.0]], scales=None, floor=0.01,
                       horizon=1.0, dt_base=2.0**-10),
    "excursion": dict(dim=3, r=0.25, s=0.5, trials=100000),
    "ldp": dict(dim=1, n=[10], trials=100000, exact=False, dump_quantile=None, max_steps=5e9),
    "oracle": dict(dim=1, n=[10]),
}


@dataclass
class ExperimentManifest:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    workers: int | None = None
    out: str = "out"
    schema_version: int = SCHEMA_VERSION

    def resolved(self) -> dict[str, Any]:
        """Parameters with defaults filled in."""
        base = dict(DEFAULTS.get(self.kind, {}))
        base.update(self.params)
        return base

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentManifest":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ManifestError([f"unknown manifest field {name!r}" for name in sorted(extra)])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        return cls.from_dict(json.loads(text))

    def hashed_part(self) -> dict[str, Any]:
        """What determines the results: everything but workers and paths."""
        return {"kind": self.kind, "params": self.resolved(), "seed": self.seed,
                "schema_version": self.schema_version}

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.hashed_part()).encode()).hexdigest()


def _cfg_violations(p: dict[str, Any], eps_key: str = "eps") -> list[str]:
    try:
        cfg = APConfig(int(p["k"]), float(p[eps_key]), float(p["delta"]), int(p["dim"]),
                       float(p.get("domain_radius", 1.0)))
    except (KeyError, TypeError, ValueError) as e:
        return [f"bad configuration: {e}"]
    return cfg.violations()


def validate(manifest: ExperimentManifest) -> list[str]:
    """Every problem with the manifest; an empty list means it can run."""
    out: list[str] = []
    if manifest.schema_version != SCHEMA_VERSION:
        out.append(f"schema_version {manifest.schema_version} is not {SCHEMA_VERSION}")
    if manifest.kind not in KINDS:
        return out + [f"unknown experiment kind {manifest.kind!r}"]
    if not isinstance(manifest.seed, int) or manifest.seed < 0:
        out.append("seed must be a nonnegative integer")
    if manifest.workers is not None and (not isinstance(manifest.workers, int) or manifest.workers < 1):
        out.append("workers must be a positive integer")
    p = manifest.resolved()
    unknown = set(p) - set(DEFAULTS[manifest.kind])
    out += [f"unknown parameter {name!r}" for name in sorted(unknown)]
    if "trials" in p and (not isinstance(p["trials"], int) or p["trials"] < 1):
        out.append("trials must be a positive integer")
    kind = manifest.kind
    if kind in ("moments", "nesting", "covariance"):
        out += _cfg_violations(p)
    if kind == "nesting":
        if not 0 < p["lam"] < 1:
            out.append("lam must lie in (0, 1)")
        else:
            out += [f"at lam*eps: {v}" for v in _cfg_violations(dict(p, eps=p["lam"] * p["eps"]))]
    if kind == "scaling":
        ladder = p.get("ladder") or []
        if not ladder:
            out.append("ladder is empty")
        else:
            out += est.check_ladder(ladder)
            for e in ladder:
                out += [f"at eps={e:g}: {v}" for v in _cfg_violations(dict(p, eps=e))]
        if p["statistic"] not in ("mean_X", "mean_X2", "p_positive"):
            out.append("statistic must be mean_X, mean_X2 or p_positive")
    if kind in ("moments", "scaling", "nesting", "covariance"):
        if not p["horizon"] > 0:
            out.append("horizon must be positive")
        if not p["dt_base"] > 0:
            out.append("dt_base must be positive")
    if kind in ("moments", "scaling"):
        if not p["max_work"] > 0:
            out.append("max_work must be positive")
        if not isinstance(p["cap"], int) or p["cap"] < 0:
            out.append("cap must be a nonnegative integer")
    if kind == "excursion" and not 0 < p["r"] < p["s"]:
        out.append("need 0 < r < s")
    if kind in ("ldp", "oracle"):
        ns = p["n"] if isinstance(p["n"], list) else [p["n"]]
        if not ns:
            out.append("n ladder is empty")
        if any(not isinstance(n, int) or n < 0 for n in ns):
            out.append("n values must be nonnegative integers")
        if not isinstance(p["dim"], int) or p["dim"] < 1:
            out.append("dim must be a positive integer")
    if kind == "ldp" and not p["max_steps"] > 0:
        out.append("max_steps must be positive")
    return out


# ---------------------------------------------------------------------------
# serialisation helpers


def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, (np.floating,)):
        return _clean(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}"
    if isinstance(x, dict):
        return {(",".join(map(str, k)) if isinstance(k, tuple) else str(k)): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        return _clean({f.name: getattr(x, f.name) for f in dataclasses.fields(x)})
    return x


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# experiment dispatch; each returns (result dict, series rows)

Row = tuple[str, float, float, float]


def _path_params(p) -> est.PathParams:
    return est.PathParams(float(p["horizon"]), float(p["dt_base"]), RefinePolicy())


def _moment_rows(r: est.MomentReport, label: str = "") -> list[Row]:
    pre = f"{label}" if label else ""
    return [(pre + "mean_X", r.eps, r.mean_X, r.se_mean_X), (pre + "mean_X2", r.eps, r.mean_X2, r.se_mean_X2),
            (pre + "p_positive", r.eps, r.p_positive, r.se_p_positive)]


def _drop(d: dict, *names) -> dict:
    return {k: v for k, v in d.items() if k not in names}


def _run_moments(p, seed, workers):
    cfg = APConfig(p["k"], p["eps"], p["delta"], p["dim"], p["domain_radius"])
    r = est.run_moments(cfg, p["trials"], seed, params=_path_params(p), cap=p["cap"],
                        budget=DetectorBudget(max_work=int(p["max_work"])), workers=workers)
    return _drop(_clean(r), "runtime"), _moment_rows(r)


def _run_scaling(p, seed, workers):
    cfg = APConfig(p["k"], p["ladder"][0], p["delta"], p["dim"], p["domain_radius"])
    s = est.run_scaling(cfg, p["ladder"], p["trials"], seed, statistic=p["statistic"], params=_path_params(p),
                        max_total_work=p["max_total_work"], workers=workers,
                        budget=DetectorBudget(max_work=int(p["max_work"])))
    rows = [row for r in s.reports for row in _moment_rows(r)]
    result = {"statistic": s.statistic, "points": s.points, "fit": s.fit,
              "reports": [_drop(_clean(r), "runtime") for r in s.reports]}
    return _clean(result), rows


def _run_nesting(p, seed, workers):
    r = est.run_nesting(p["trials"], p["eps"], p["lam"], seed, k=p["k"], delta=p["delta"], dim=p["dim"],
                        domain_radius=p["domain_radius"], params=_path_params(p), workers=workers)
    res = _clean(r)
    res["violation_fraction"] = r.violation_fraction
    return res, [("violation_fraction", p["eps"], r.violation_fraction, 0.0)]


def _run_covariance(p, seed, workers):
    cfg = APConfig(p["k"], p["eps"], p["delta"], p["dim"], p["domain_radius"])
    r = est.run_covariance(cfg, p["anchor"], p["trials"], seed, scales=p["scales"], floor=p["floor"],
                           params=_path_params(p), workers=workers)
    rows = [("cov_lag", float(lag), c, s) for lag, (c, s) in sorted(r.lag_cov.items())]
    rows += [("marginal", float(k), m, s) for k, (m, s) in sorted(r.marginals.items())]
    return _clean(r), rows


def _run_excursion(p, seed, workers):
    r = est.run_excursion_tail(p["r"], p["s"], p["trials"], seed, dim=p["dim"], workers=workers)
    rows = [("tail", float(m), q, s) for m, q, s in r.tail]
    rows.append(("ratio", r.r / r.s, r.ratio, r.ratio_se))
    return _clean(r), rows


def _as_list(v):
    return v if isinstance(v, list) else [v]


def _run_ldp(p, seed, workers):
    r = est.run_ldp(p["dim"], _as_list(p["n"]), p["trials"], seed, exact=p["exact"],
                    dump_quantile=p["dump_quantile"], max_steps=p["max_steps"], workers=workers)
    rows: list[Row] = []
    for rung in r.rungs:
        for c, f in sorted(rung.histogram.items()):
            q = f / rung.trials
            rows.append((f"hist_n{rung.n}", float(c), q, math.sqrt(q * (1 - q) / rung.trials)))
        if rung.exact is not None:
            rows += [(f"exact_n{rung.n}", float(c), float(v), 0.0) for c, v in sorted(rung.exact.items())]
        rows.append(("mean", float(rung.n), rung.mean, rung.se_mean))
    res = _clean(r)
    for rung, out in zip(r.rungs, res["rungs"]):
        out["max_z"] = _clean(rung.max_z())
    return res, rows


def _run_oracle(p, seed, workers):
    from ap_trace.oracle import exhaustive_walk_distribution

    dists = {n: exhaustive_walk_distribution(n, p["dim"]) for n in _as_list(p["n"])}
    rows = [(f"exact_n{n}", float(c), float(v), 0.0) for n, dist in dists.items() for c, v in sorted(dist.items())]
    return _clean({"dim": p["dim"], "distributions": dists}), rows


RUNNERS = {"moments": _run_moments, "scaling": _run_scaling, "nesting": _run_nesting,
           "covariance": _run_covariance, "excursion": _run_excursion, "ldp": _run_ldp, "oracle": _run_oracle}


def series_csv(kind: str, rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_COLUMNS)
    for name, x, v, s in rows:
        w.writerow([SCHEMA_VERSION, kind, name, repr(float(x)), repr(_num(v)), repr(_num(s))])
    return buf.getvalue()


def _num(v) -> float:
    v = float(v) if v is not None else float("nan")
    return v


@dataclass
class RunOutcome:
    status: int
    report: dict[str, Any]
    series: str = ""

    @property
    def payload(self) -> str:
        """The hashed region as canonical JSON."""
        return canonical_json({k: v for k, v in self.report.items() if k not in ("timing", "payload_sha256")})


def execute(manifest: ExperimentManifest) -> RunOutcome:
    """Run a manifest in memory.  Status 0 ok, 2 invalid manifest, 3 aborted."""
    problems = validate(manifest)
    head = {"schema_version": SCHEMA_VERSION, "manifest": manifest.hashed_part(), "manifest_hash": manifest.hash()}
    if problems:
        return RunOutcome(2, dict(head, error={"type": "invalid_manifest", "violations": problems}))
    workers = resolve_workers(manifest.workers)
    p = manifest.resolved()
    t0 = time.perf_counter()
    try:
        result, rows = RUNNERS[manifest.kind](p, manifest.seed, workers)
    except BudgetExceeded as e:
        return RunOutcome(3, dict(head, error={"type": "budget_exceeded", "what": e.what, "work": e.work,
                                               "limit": e.limit, "message": str(e)}))
    except ConditioningInfeasible as e:
        return RunOutcome(3, dict(head, error={"type": "conditioning_infeasible", "message": str(e),
                                               "acceptance_rate": e.acceptance_rate, "floor": e.floor}))
    report = dict(head, result=result,
                  timing={"wall_time": time.perf_counter() - t0, "workers": workers})
    return RunOutcome(0, report, series_csv(manifest.kind, rows))


def run(manifest: ExperimentManifest) -> tuple[int, Path]:
    """Execute and write ``<out>/report.json`` (and ``series.csv`` on success)."""
    outcome = execute(manifest)
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    outcome.report["payload_sha256"] = hashlib.sha256(outcome.payload.encode()).hexdigest()
    text = json.dumps(_clean(outcome.report), sort_keys=True, indent=2, allow_nan=False)
    (out / "report.json").write_text(text + "\n")
    if outcome.status == 0:
        (out / "series.csv").write_text(outcome.series)
    return outcome.status, out / "report.json"
