"""Command-line entry points for the matching-task benchmark."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .core import SCHEMA_VERSION


def _cmd_suite(args) -> int:
    rng = np.random.default_rng(args.seed)
    cases = bench.build_test_suite(args.n, rng, oracle=args.oracle)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n": args.n,
        "seed": args.seed,
        "cases": [c.to_dict() for c in cases],
    }
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def load_cases(path: str | Path) -> list[bench.TestCase]:
    payload = json.loads(Path(path).read_text())
    return [bench.TestCase.from_dict(d) for d in payload["cases"]]


def _cmd_run(args) -> int:
    cases = load_cases(args.cases)
    if args.limit:
        cases = bench.select_subset(cases, args.limit)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in bench.METHODS]
    if unknown:
        print(f"unknown methods: {unknown}", file=sys.stderr)
        return 2
    records = bench.run_suite(
        cases,
        methods,
        seeds=args.seeds,
        oracle=args.oracle,
        jobs=args.jobs,
        collection_seed=args.collection_seed,
    )
    Path(args.out).write_text(bench.records_to_csv(records))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_report(args) -> int:
    records = bench.records_from_csv(Path(args.infile).read_text())
    summary = bench.aggregate(records)
    Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
    for method, stats in summary["methods"].items():
        print(
            f"{method:18s} mean final sim {stats['mean_final_similarity']:.4f}  "
            f"success@0.9 {stats['success_0.9']:.2f}  "
            f"median F1 {stats['median_final_f1']:.2f}"
        )
    if summary["missing"]:
        print(f"WARNING: {len(summary['missing'])} missing cells", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_suite = sub.add_parser("suite", help="construct the 30-case test suite")
    p_suite.add_argument("--n", type=int, default=20)
    p_suite.add_argument("--seed", type=int, default=0)
    p_suite.add_argument("--oracle", choices=["coefficient", "render"], default="coefficient")
    p_suite.add_argument("--out", required=True)
    p_suite.set_defaults(func=_cmd_suite)

    p_run = sub.add_parser("run", help="run methods against a suite")
    p_run.add_argument("--methods", default="ours,gallery,cyclic_cd,random_cd,random_dir")
    p_run.add_argument("--cases", required=True)
    p_run.add_argument("--seeds", type=int, default=2)
    p_run.add_argument("--oracle", choices=["coefficient", "render"], default=None,
                       help="override the per-case oracle")
    p_run.add_argument("--limit", type=int, default=0,
                       help="z-stratified subset size (0 = all cases)")
    p_run.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p_run.add_argument("--collection-seed", type=int, default=0)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="aggregate a results CSV")
    p_report.add_argument("--in", dest="infile", required=True)
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
