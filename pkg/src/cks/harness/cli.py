"""``cks-harness``: run attack scenarios and print a JSON verdict report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from .scenarios import SCENARIOS, run_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cks-harness", description="Attack the key store and report verdicts.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list scenarios")
    for name in ("run", "run-all"):
        s = sub.add_parser(name, help="run one scenario" if name == "run" else "run every scenario in order")
        if name == "run":
            s.add_argument("scenario", choices=sorted(SCENARIOS))
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workdir", help="keep host data and logs here (default: a temporary directory)")
        s.add_argument("--report", help="also write the JSON report to this file")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(names: list[str], seed: int, workdir: Path) -> dict:
    verdicts = []
    for name in names:
        verdict = run_scenario(SCENARIOS[name], seed, workdir)
        logging.getLogger("cks.harness").info("%s: %s", name, "pass" if verdict.passed else "FAIL")
        verdicts.append(verdict.to_dict())
    return {"seed": seed, "passed": all(v["passed"] for v in verdicts), "scenarios": verdicts}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name, scenario in SCENARIOS.items():
            print(f"{name:32} {scenario.expected_outcome}  {scenario.description}")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    names = [args.scenario] if args.command == "run" else list(SCENARIOS)
    if args.workdir:
        report = run(names, args.seed, Path(args.workdir))
    else:
        with tempfile.TemporaryDirectory(prefix="cks-harness-") as tmp:
            report = run(names, args.seed, Path(tmp))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
