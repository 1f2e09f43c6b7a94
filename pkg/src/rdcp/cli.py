"""``rdcp`` command line: run experiments, solve curves, regenerate goldens."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .core import DistortionSpec, DivergenceSpec, SourceSpecError, load_source
from .experiments import CellError, ConfigError, report_header, run_experiment, write_report
from .solver import MODES, SolverConfig, trace_curve

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _floats(text: str) -> list:
    items = [t for t in text.split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _cmd_run(args) -> int:
    path = Path(args.config)
    if not path.exists():
        print(f"error: config file {path} not found", file=sys.stderr)
        return EXIT_CONFIG
    text = path.read_text()
    try:
        res, header = run_experiment(text, path.parent, args.seed_override, args.jobs, str(path))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    report = write_report(res, header, out)
    for a in report["assertions"]:
        print(f"{'PASS' if a['pass'] else 'FAIL'}  {a['name']}")
    for f in report["flags"]:
        print(f"note  {f}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK if report["all_pass"] else EXIT_FAIL


def _cmd_solve(args) -> int:
    try:
        src = load_source(args.source)
    except (OSError, SourceSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.D:
        print("config error: D grid must not be empty", file=sys.stderr)
        return EXIT_CONFIG
    P = args.P if args.P else [float("inf")]
    try:
        d = DistortionSpec.for_source(src, args.distortion)
        curve = trace_curve(src, d, DivergenceSpec(args.divergence), sorted(args.D), sorted(P),
                            SolverConfig(tol=args.tol), args.mode, args.jobs)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    header = report_header(Path(args.source).read_text())
    text = curve.to_csv(header)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_goldens(args) -> int:
    from .goldens import compare, regenerate

    out = Path(args.out)
    if args.check:
        summary = compare(out)
    elif not args.confirm:
        print("refusing to rewrite goldens without --confirm (use --check to compare only)",
              file=sys.stderr)
        return EXIT_CONFIG
    else:
        summary = regenerate(out)
        if summary["created_dir"]:
            print(f"created output directory {out}")
    for key in ("changed", "new"):
        for name in summary[key]:
            print(f"{key:9s} {name}")
    print(f"{len(summary['unchanged'])} unchanged, {len(summary['changed'])} changed, "
          f"{len(summary['new'])} new")
    if args.check and (summary["changed"] or summary["new"]):
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdcp", description=__doc__)
    p.add_argument("--version", action="version", version=f"rdcp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed-override", type=int, default=None)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("solve", help="trace R(D, P) for a source file and print CSV")
    s.add_argument("--source", required=True)
    s.add_argument("--D", type=_floats, required=True, help="comma-separated D grid")
    s.add_argument("--P", type=_floats, default=None, help="comma-separated P grid (default inf)")
    s.add_argument("--divergence", choices=("tv", "kl", "w2"), default="tv")
    s.add_argument("--distortion", choices=("hamming", "mse"), default="hamming")
    s.add_argument("--mode", choices=MODES, default="per-y")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default=None, help="CSV path (default stdout)")
    s.set_defaults(func=_cmd_solve)

    g = sub.add_parser("regen-goldens", help="rewrite golden bitstreams and pipelines")
    g.add_argument("--out", default="tests/golden")
    g.add_argument("--confirm", action="store_true", help="required to write files")
    g.add_argument("--check", action="store_true", help="compare only; exit 1 on any diff")
    g.set_defaults(func=_cmd_goldens)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
