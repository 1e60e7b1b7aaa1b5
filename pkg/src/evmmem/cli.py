"""Command line entry point: analyze, corpus, fetch."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import driver
from .fixtures import Fixture

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_UNSOUND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means "analysis failed" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.add_argument("--timeout-secs", type=float, default=120.0, metavar="N")
    p.add_argument("--max-clones", type=int, default=64, metavar="N")
    p.add_argument("--seed", type=int, default=None, help="randomize worklist order")
    p.add_argument("--timing", action="store_true", help="include wall-clock times in output")
    p.add_argument("--oracle-check", action="store_true",
                   help="execute descriptor calldata and run the soundness checkers")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evmmem", description="Needless memory write detection for EVM bytecode")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="analyze one contract (.hex, .bin or a .json descriptor)")
    a.add_argument("file", type=Path)
    _common(a)
    a.add_argument("--descriptor", type=Path, help="fixture descriptor for --oracle-check")
    a.add_argument("--dot", type=Path, metavar="FILE", help="write the CFG in Graphviz format")

    c = sub.add_parser("corpus", help="analyze every .hex/.bin file in a directory")
    c.add_argument("dir", type=Path)
    _common(c)
    c.add_argument("--jobs", type=int, default=1)

    f = sub.add_parser("fetch", help="download runtime bytecode for an address")
    f.add_argument("address")
    f.add_argument("--endpoint", required=True, help="explorer API or JSON-RPC URL")
    f.add_argument("--style", choices=("explorer", "rpc"), default="explorer")
    f.add_argument("--cache-dir", type=Path, default=Path(".evmmem-cache"))
    f.add_argument("-o", "--output", type=Path, help="write hex here instead of stdout")
    return ap


def _config(args) -> driver.AnalysisConfig:
    return driver.AnalysisConfig(timeout_secs=args.timeout_secs or None,
                                 max_clones=args.max_clones, seed=args.seed,
                                 include_timing=args.timing)


def _print_checks(name: str, reps, out) -> int:
    bad = 0
    for r in reps:
        bad += len(r.violations)
        print(f"oracle {name} {r}", file=out)
        for v in r.violations[:20]:
            print(f"  {v}", file=out)
    return bad


def _analyze(args, ap) -> int:
    config = _config(args)
    fixture = None
    try:
        if args.file.suffix == ".json":
            fixture = Fixture.from_descriptor(json.loads(args.file.read_text()))
            code = fixture.code
        else:
            code = driver.read_contract(args.file)
    except (OSError, ValueError, KeyError) as e:
        ap.error(f"cannot read {args.file}: {e}")
    if args.descriptor:
        try:
            fixture = Fixture.from_descriptor(json.loads(args.descriptor.read_text()))
        except (OSError, ValueError, KeyError) as e:
            ap.error(f"cannot read descriptor {args.descriptor}: {e}")
    elif fixture is None and args.oracle_check:
        fixture = driver.load_descriptor(args.file)
    if args.oracle_check and fixture is None:
        ap.error("--oracle-check needs a descriptor")

    report = driver.analyze_contract(code, config, contract_id=args.file.name,
                                     keep_artifacts=args.dot is not None)
    sys.stdout.buffer.write(driver.render(report, args.format, include_timing=args.timing))
    if args.dot is not None and report.artifacts is not None:
        args.dot.write_text(report.artifacts.cfg.to_dot())
    if not report.ok:
        return EXIT_FAILED
    if args.oracle_check:
        reps = driver.oracle_check(code, fixture, config)
        bad = _print_checks(fixture.name, reps, sys.stdout)
        if fixture.expected:
            for msg in driver.check_expected(report, fixture.expected):
                print(f"expected mismatch: {msg}")
                bad += 1
        if bad:
            return EXIT_UNSOUND
    return EXIT_OK


def _corpus(args, ap) -> int:
    if not args.dir.is_dir():
        ap.error(f"{args.dir} is not a directory")
    if args.jobs < 1:
        ap.error("--jobs must be at least 1")
    summary = driver.run_corpus(args.dir, _config(args), jobs=args.jobs, oracle=args.oracle_check)
    sys.stdout.buffer.write(driver.render_summary(summary, args.format, include_timing=args.timing))
    if summary.failed:
        return EXIT_FAILED
    if any(r.violations for reps in summary.oracle.values() for r in reps):
        return EXIT_UNSOUND
    return EXIT_OK


def _fetch(args, ap) -> int:
    ep = driver.Endpoint(args.endpoint, style=args.style, cache_dir=args.cache_dir)
    try:
        code = driver.fetch_bytecode(args.address, ep)
    except ValueError as e:
        ap.error(str(e))
    except driver.FetchError as e:
        print(f"fetch failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    text = code.hex() + "\n"
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"analyze": _analyze, "corpus": _corpus, "fetch": _fetch}[args.cmd]
    return handler(args, ap)


if __name__ == "__main__":
    sys.exit(main())
