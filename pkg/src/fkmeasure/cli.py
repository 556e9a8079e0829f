"""Command line: ``fkmeasure run|list|check``.

Exit codes: 0 ok, 1 assertion failure, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .runner import CHECKS, NumericFailure, run_scenario, write_report
from .scenarios import ScenarioError, catalog, load_scenario

EXIT_OK, EXIT_ASSERT, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


def _print_failures(name, rep, out):
    for check, qty, value, thr, _ in rep.failures:
        print(f"{name}: FAIL {check}.{qty} value={value!r} threshold={thr!r}", file=out)


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        rep = run_scenario(sc, n_paths=args.paths, seed=args.seed, workers=args.workers)
    except ScenarioError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out) if args.out else Path("reports") / sc.name
    write_report(rep, sc.grid, out)
    n_checked = sum(1 for r in rep.residuals if r[4] is not None) + len(rep.estimates)
    if rep.ok:
        print(f"{sc.name}: ok ({n_checked} assertions) -> {out}")
        return EXIT_OK
    _print_failures(sc.name, rep, sys.stderr)
    return EXIT_ASSERT


def cmd_list(args) -> int:
    for entry in catalog():
        print(f"{entry['name']:<20} {entry['anchor']}")
    return EXIT_OK


def cmd_check(args) -> int:
    suite = args.suite
    if suite != "all" and suite not in CHECKS:
        print(f"input error: unknown suite {suite!r}; choose from all, {', '.join(CHECKS)}",
              file=sys.stderr)
        return EXIT_INPUT
    code = EXIT_OK
    ran = 0
    for entry in catalog():
        if suite != "all" and suite not in entry["checks"]:
            continue
        sc = load_scenario(entry["name"])
        try:
            rep = run_scenario(sc, n_paths=args.paths, seed=args.seed,
                               only=None if suite == "all" else {suite})
        except NumericFailure as exc:
            print(f"{sc.name}: {exc}", file=sys.stderr)
            code = max(code, EXIT_NUMERIC)
            continue
        ran += 1
        status = "pass" if rep.ok else "FAIL"
        print(f"{suite:<12} {sc.name:<20} {status}")
        if not rep.ok:
            _print_failures(sc.name, rep, sys.stdout)
            code = max(code, EXIT_ASSERT)
    if ran == 0 and code == EXIT_OK:
        print(f"no bundled scenario runs suite {suite!r}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fkmeasure", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario file or bundled scenario")
    r.add_argument("scenario")
    r.add_argument("--paths", type=int, default=None, help="Monte Carlo paths per start point")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="report directory (default reports/<name>)")
    r.add_argument("--workers", type=int, default=None, help="processes for path sampling")
    r.set_defaults(func=cmd_run)
    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    c = sub.add_parser("check", help="run one check suite over the bundled scenarios")
    c.add_argument("suite")
    c.add_argument("--paths", type=int, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
