"""Exit criteria, run at their stated sizes and tolerances.

Each test prints one PASS/FAIL line (collected again in the terminal
summary) and then asserts the criterion.  Frozen constants live in
acceptance_config.json.  Slow: the whole module takes the better part of an
hour on one core.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import record
from fuzzing import fuzz_cell_set, fuzz_range

from ap_trace.brownian import BallSpec
from ap_trace.detector import count_3aps_exact, enumerate_X
from ap_trace.errors import BudgetExceeded
from ap_trace.estimators import (
    run_covariance,
    run_domination,
    run_excursion_tail,
    run_hitting,
    run_ldp,
    run_nesting,
    run_scaling,
)
from ap_trace.geometry import APConfig
from ap_trace.manifest import ExperimentManifest, execute, run
from ap_trace.oracle import brute_3aps, brute_enumerate_X

CFG = json.loads((Path(__file__).parent / "acceptance_config.json").read_text())
SEED = CFG["seed"]

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def hitting():
    c = CFG["hitting"]
    return run_hitting(BallSpec(tuple(c["center"]), c["radius"]), c["trials"], SEED, horizon=c["horizon"],
                       dt_base=c["dt_base"])


def test_criterion_01_hitting_probability(hitting):
    c = CFG["hitting"]
    rep = hitting
    z = (rep.rate - c["target"]) / rep.se
    law = rep.finite_horizon_law()
    z_law = (rep.rate - law) / rep.se
    ok = abs(z) <= c["n_se"]
    record(1, ok, f"rate {rep.rate:.5f} +- {rep.se:.5f} vs {c['target']} (z = {z:+.1f}); "
                  f"finite-horizon law {law:.5f} (z = {z_law:+.1f})")
    assert ok


def test_criterion_01_supplement_finite_horizon(hitting):
    # same run; the horizon T = 200 law is the quantity the simulation estimates
    c = CFG["hitting"]
    rep = hitting
    assert abs(rep.rate - rep.finite_horizon_law()) <= c["n_se"] * rep.se


def test_criterion_02_detector_oracle_equivalence():
    c = CFG["fuzz"]
    rng = np.random.default_rng(c["seed"])
    bad_sets, nonzero = 0, 0
    for _ in range(c["cell_sets"]):
        cells, cfg = fuzz_cell_set(rng, c["max_cells"])
        a = enumerate_X(cells, cfg, cap=0)
        b = brute_enumerate_X(cells, cfg)
        nonzero += b.x_total > 0
        bad_sets += a.x_total != b.x_total or a.bucket_counts != b.bucket_counts
    bad_ranges = 0
    for _ in range(c["ranges"]):
        s = fuzz_range(rng, c["max_sites"])
        bad_ranges += count_3aps_exact(s) != brute_3aps(s)
    ok = bad_sets == 0 and bad_ranges == 0
    record(2, ok, f"{bad_sets}/{c['cell_sets']} cell sets differ ({nonzero} with X > 0), "
                  f"{bad_ranges}/{c['ranges']} ranges differ")
    assert ok


def _scaling(k: int):
    c = CFG["scaling"]
    template = APConfig(k, c["ladder"][0], c["delta"], c["dim"], c["domain_radius"])
    return run_scaling(template, c["ladder"], c["trials"], SEED, max_total_work=c["max_total_work"])


def test_criterion_03_five_ap_scaling():
    c = CFG["scaling"]
    try:
        s = _scaling(5)
    except BudgetExceeded as e:
        record(3, False, f"aborted: {e}")
        pytest.fail(str(e))
    floor = c["p_positive_floor_k5"]
    slope_ok = abs(s.slope - c["slope_target"]) <= c["slope_tolerance"]
    p_ok = floor is not None and all(r.p_positive > floor for r in s.reports)
    record(3, slope_ok and p_ok, f"slope {s.slope:.3f} +- {s.fit.slope_se:.3f}; "
                                 f"p_positive {[round(r.p_positive, 3) for r in s.reports]} floor {floor}")
    assert slope_ok and p_ok


def test_criterion_04_six_ap_boundedness():
    try:
        s = _scaling(6)
    except BudgetExceeded as e:
        record(4, False, f"aborted: {e}")
        pytest.fail(str(e))
    means = [r.mean_X for r in s.reports]
    ratio = max(means) / min(means) if min(means) > 0 else math.inf
    ps = [(r.p_positive, r.se_p_positive) for r in s.reports]
    mono = all(b[0] <= a[0] + 2 * math.hypot(a[1], b[1]) for a, b in zip(ps, ps[1:]))
    ok = ratio <= CFG["scaling"]["max_min_ratio_k6"] and mono
    record(4, ok, f"mean_X max/min {ratio:.2f}; p_positive {[round(p, 3) for p, _ in ps]}")
    assert ok


def test_criterion_05_pathwise_domination():
    c = CFG["domination"]
    s = CFG["scaling"]
    cfg = APConfig(5, c["eps"], c["delta"], s["dim"], s["domain_radius"])
    rep = run_domination(cfg, c["trials"], SEED, closed_work=c["closed_work"])
    ok = rep.violations == 0 and rep.undetermined == 0
    pairs = "; ".join(f"path {i}: X5 in [{a[0]:.4g}, {a[1]:.4g}], X6 in [{b[0]:.4g}, {b[1]:.4g}] {v}"
                      for i, (a, b, v) in enumerate(zip(rep.bounds_lo, rep.bounds_hi, rep.verdicts)))
    record(5, ok, f"{rep.violations} violated, {rep.undetermined} undetermined of {rep.trials}; "
                  f"X6 > 0 on {rep.positive_hi}; X6 > 0 implies X5 > 0: {rep.existence_ok}; {pairs}")
    assert ok


def test_criterion_06_nesting():
    c = CFG["nesting"]
    rep = run_nesting(c["trials"], c["eps"], c["lam"], SEED, k=c["k"], delta=c["delta"])
    ok = rep.violations == 0
    record(6, ok, f"{rep.violations} violations in {rep.trials} paths; X(eps) > 0 on {rep.coarse_positive}, "
                  f"X(lam eps) checked on {rep.fine_checked}")
    assert ok


def test_criterion_07_excursion_tail():
    c = CFG["excursion"]
    parts, ok = [], True
    for q in c["ratios"]:
        rep = run_excursion_tail(q * c["s"], c["s"], c["trials"], SEED)
        z = (rep.ratio - q) / rep.ratio_se
        ok &= abs(z) <= c["n_se"]
        parts.append(f"r/s {q}: ratio {rep.ratio:.4f} +- {rep.ratio_se:.4f} (z = {z:+.1f}), "
                     f"log-tail fit {rep.fit_ratio:.4f}")
    record(7, ok, "; ".join(parts))
    assert ok


def test_criterion_08_covariance_decay():
    c = CFG["covariance"]
    cfg = APConfig(c["k"], c["eps"], c["delta"], 3, c["domain_radius"])
    rep = run_covariance(cfg, c["anchor"], c["trials"], SEED, floor=c["floor"])
    mono = rep.nonincreasing(c["n_se"])
    ok = mono and rep.acceptance_rate > c["floor"]
    lags = ", ".join(f"lag {k}: {v[0]:.4f} +- {v[1]:.4f}" for k, v in sorted(rep.lag_cov.items()))
    record(8, ok, f"{lags}; acceptance {rep.acceptance_rate:.4f} ({rep.accepted}) vs floor {c['floor']}")
    assert ok


def test_criterion_09_walk_exact_small_case(tmp_path):
    c = CFG["ldp"]
    rep = run_ldp(1, c["ladder"], c["trials"], SEED, exact=True)
    zs = {r.n: r.max_z() for r in rep.rungs}
    exact_ok = all(z <= c["n_se"] for z in zs.values())
    e = c["explore"]
    files_ok = True
    for d in e["dims"]:
        texts = []
        for name in ("a", "b"):
            m = ExperimentManifest("ldp", {"dim": d, "n": e["ladder"], "trials": e["trials"],
                                           "dump_quantile": e["dump_quantile"]}, seed=SEED,
                                   out=str(tmp_path / f"d{d}{name}"))
            status, path = run(m)
            report = json.loads(path.read_text())
            report.pop("timing")
            texts.append((status, json.dumps(report, sort_keys=True), (path.parent / "series.csv").read_text()))
        files_ok &= texts[0] == texts[1] and texts[0][0] == 0
    ok = exact_ok and files_ok
    record(9, ok, f"d=1 max |z| per rung {{{', '.join(f'{n}: {z:.2f}' for n, z in zs.items())}}}; "
                  f"d>=2 files reproducible: {files_ok}")
    assert ok


DETERMINISM_MANIFESTS = [
    ("moments", {"k": 3, "eps": 0.125, "delta": 0.6, "dim": 1, "horizon": 0.5, "trials": 16}),
    ("scaling", {"k": 3, "dim": 1, "ladder": [0.125, 0.0625, 0.03125], "horizon": 0.5, "trials": 8}),
    ("nesting", {"trials": 16, "horizon": 0.05}),
    ("covariance", {"trials": 800, "floor": 0.001}),
    ("excursion", {"trials": 3000}),
    ("ldp", {"dim": 2, "n": [20, 40], "trials": 20000, "dump_quantile": 0.99}),
    ("oracle", {"dim": 2, "n": [4]}),
]


def test_criterion_10_determinism():
    bad = []
    for kind, params in DETERMINISM_MANIFESTS:
        hashes = set()
        for w in CFG["determinism"]["workers"]:
            out = execute(ExperimentManifest(kind, dict(params), seed=SEED, workers=w))
            assert out.status == 0, out.report.get("error")
            hashes.add(out.payload)
        if len(hashes) != 1:
            bad.append(kind)
    ok = not bad
    record(10, ok, f"{len(DETERMINISM_MANIFESTS)} experiment kinds at workers {CFG['determinism']['workers']}; "
                   f"differing: {bad or 'none'}")
    assert ok
