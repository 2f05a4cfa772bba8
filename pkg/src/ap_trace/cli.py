"""Command line entry point: ``ap-trace <experiment> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ap_trace.errors import ManifestError
from ap_trace.manifest import KINDS, ExperimentManifest, run, validate


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


# flag name -> (manifest key, type, help)
_FLAGS = {
    "dim": ("dim", int, "dimension"),
    "k": ("k", int, "progression length"),
    "eps": ("eps", float, "approximation scale"),
    "delta": ("delta", float, "separation"),
    "domain-radius": ("domain_radius", float, "radius of the domain ball"),
    "horizon": ("horizon", float, "path horizon T"),
    "dt": ("dt_base", float, "base time step"),
    "cap": ("cap", int, "tuple storage cap (0 stores none)"),
    "ladder": ("ladder", _floats, "geometric eps ladder, comma separated"),
    "statistic": ("statistic", str, "statistic fitted by scaling"),
    "lam": ("lam", float, "nesting ratio"),
    "anchor": ("anchor", json.loads, "anchor tuple as a JSON list of points"),
    "scales": ("scales", _ints, "window scales, comma separated"),
    "floor": ("floor", float, "minimum conditioning acceptance rate"),
    "r": ("r", float, "inner excursion radius"),
    "s": ("s", float, "outer excursion radius"),
    "n": ("n", _ints, "walk lengths, comma separated"),
    "dump-quantile": ("dump_quantile", float, "dump ranges with counts above this quantile"),
    "max-work": ("max_work", float, "per-path work limit of the exact counter"),
}

_KIND_FLAGS = {
    "moments": ["dim", "k", "eps", "delta", "domain-radius", "horizon", "dt", "cap", "max-work"],
    "scaling": ["dim", "k", "delta", "domain-radius", "horizon", "dt", "cap", "ladder", "statistic", "max-work"],
    "nesting": ["dim", "k", "eps", "delta", "domain-radius", "horizon", "dt", "lam"],
    "covariance": ["dim", "k", "eps", "delta", "domain-radius", "horizon", "dt", "anchor", "scales", "floor"],
    "excursion": ["dim", "r", "s"],
    "ldp": ["dim", "n", "dump-quantile"],
    "oracle": ["dim", "n"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ap-trace", description="Approximate progressions on Brownian traces.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        for flag in _KIND_FLAGS[kind]:
            key, typ, help_ = _FLAGS[flag]
            default = 0.1 if flag == "delta" and kind == "moments" else None
            sp.add_argument(f"--{flag}", dest=key, type=typ, default=default, help=help_)
        if kind != "oracle":
            sp.add_argument("--trials", type=int, default=None, help="number of trials")
        if kind == "ldp":
            sp.add_argument("--exact", action="store_true", help="also compute the exhaustive distribution")
        sp.add_argument("--seed", type=int, default=0, help="base seed")
        sp.add_argument("--threads", type=int, default=None, help="workers (default: AP_TRACE_THREADS or CPUs)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--manifest", type=Path, default=None, help="run this manifest file instead")
    vp = sub.add_parser("validate", help="check a manifest file")
    vp.add_argument("manifest", type=Path)
    return parser


def manifest_from_args(args: argparse.Namespace) -> ExperimentManifest:
    if args.manifest is not None:
        m = ExperimentManifest.from_json(args.manifest.read_text())
        if args.threads is not None:
            m.workers = args.threads
        return m
    params = {}
    for flag in _KIND_FLAGS[args.command]:
        key = _FLAGS[flag][0]
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if getattr(args, "trials", None) is not None:
        params["trials"] = args.trials
    if getattr(args, "exact", False):
        params["exact"] = True
    return ExperimentManifest(args.command, params, seed=args.seed, workers=args.threads, out=args.out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            m = ExperimentManifest.from_json(args.manifest.read_text())
            problems = validate(m)
            print(json.dumps({"valid": not problems, "violations": problems}, indent=2))
            return 0 if not problems else 1
        m = manifest_from_args(args)
    except ManifestError as e:
        print(json.dumps({"valid": False, "violations": e.violations}, indent=2), file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(json.dumps({"valid": False, "violations": [str(e)]}, indent=2), file=sys.stderr)
        return 2
    status, path = run(m)
    report = json.loads(path.read_text())
    if status:
        print(json.dumps(report["error"], indent=2), file=sys.stderr)
    else:
        print(f"wrote {path} and {path.with_name('series.csv')}")
    return status


if __name__ == "__main__":
    sys.exit(main())
