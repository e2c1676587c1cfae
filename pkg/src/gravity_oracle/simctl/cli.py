"""Command line: ``run``, ``validate`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .report import load_report, render, report_metrics
from .runner import run, write_outputs
from .scenario import ScenarioError, load_scenario


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gravity-sim", description="Deterministic oracle network simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write report.json and logs")
    r.add_argument("scenario", type=Path)
    r.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<scenario name>)")
    r.add_argument("--seed", type=_u64, default=None)
    r.add_argument("--ticks", type=int, default=None)

    v = sub.add_parser("validate", help="check a scenario file and list every problem")
    v.add_argument("scenario", type=Path)

    rep = sub.add_parser("report", help="summarise a finished run and render figures")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--format", choices=("text", "json"), default="text")
    rep.add_argument("--no-figures", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command in ("run", "validate"):
        try:
            scenario = load_scenario(args.scenario, seed=getattr(args, "seed", None), ticks=getattr(args, "ticks", None))
        except ScenarioError as err:
            print(err, file=sys.stderr)
            return 2
        except OSError as err:
            print(f"cannot read scenario: {err}", file=sys.stderr)
            return 2
        if args.command == "validate":
            print(f"ok: {args.scenario}")
            return 0
        result = run(scenario)
        out = write_outputs(result, args.out or Path("runs") / args.scenario.stem)
        m = result.report["metrics"]
        print(f"wrote {out}")
        print(f"rounds\t{m['rounds_total']}\tdelivered\t{m['rounds_delivered']}\tfailed\t{m['rounds_failed']}")
        print(f"ledger_head\t{result.report['ledger']['head_digest']}")
        return 0

    try:
        report = load_report(args.run_dir)
    except (OSError, ValueError) as err:
        print(f"cannot read report: {err}", file=sys.stderr)
        return 2
    metrics = report_metrics(report)
    sys.stdout.write(render(metrics, args.format))
    if not args.no_figures:
        from .plotting import render_figures

        for path in render_figures(metrics, args.run_dir):
            logging.info("figure %s", path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
