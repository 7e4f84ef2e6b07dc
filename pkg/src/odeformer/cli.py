"""Command line entry point: ``odeformer <study> --config <path> [--seeds 1,2,3] [--out dir]``."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .studies import STUDIES, StudyConfig, parse_list


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odeformer", description="ODE-block Transformer studies")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STUDIES.items():
        doc = (fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else name
        p = sub.add_parser(name, aliases=[name.replace("_", "-")], help=doc)
        p.set_defaults(study=name)
        p.add_argument("--config", type=Path, help="key=value study config (defaults if omitted)")
        p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds (default 1,2,3)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default results/<study>)")
    d = sub.add_parser("defaults", help="print the default study config")
    d.set_defaults(study=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.study is None:
        sys.stdout.write(StudyConfig().to_text())
        return 0
    config = StudyConfig.load(args.config) if args.config else StudyConfig()
    seeds = parse_list(args.seeds, int)
    out = args.out or Path("results") / args.study
    start = time.perf_counter()
    report = STUDIES[args.study](config, seeds, out_dir=out)
    paths = report.write(out)
    for line in report.summary_lines():
        print(line)
    print(f"{args.study}: {'PASS' if report.passed else 'FAIL'} "
          f"({sum(p.passed for p in report.properties)}/{len(report.properties)} properties, "
          f"{time.perf_counter() - start:.1f}s); wrote {len(paths)} files to {out}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
