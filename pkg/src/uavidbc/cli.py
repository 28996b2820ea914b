"""Command-line front end.

    uavidbc run --scenario F --seed N --out D
    uavidbc preset --name P --seed N --out D [--workers K]
    uavidbc verify-chain --file F

Set UAVIDBC_LOG (DEBUG, INFO, WARNING, ...) for log verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .ledger import WireError, parse_chain_file, verify_chain
from .presets import PRESETS, UnknownPreset, run_preset
from .sim.engine import run
from .sim.scenario import InvalidScenario, ScenarioParseError, load_scenario

log = logging.getLogger("uavidbc")


def cmd_run(scenario_path, seed, out_dir) -> int:
    try:
        scenario = load_scenario(scenario_path)
        if seed is not None:
            scenario = scenario.with_seed(seed)
        report = run(scenario)
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return 2
    except ScenarioParseError as exc:
        print(f"error: {scenario_path}: {exc}", file=sys.stderr)
        return 2
    except InvalidScenario as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return 3
    paths = report.write(out_dir)
    log.info("wrote %d files to %s", len(paths), out_dir)
    bad = [r for r in report.integrity if not r.ok]
    if bad:
        print(f"warning: integrity check failed in {len(bad)} cluster-periods", file=sys.stderr)
    print(f"ok: {scenario.periods} periods, {len(report.chains[0])} blocks -> {out_dir}")
    return 0


def cmd_preset(name, seed, out_dir, workers: int = 1) -> int:
    try:
        result = run_preset(name, seed, workers=workers)
    except UnknownPreset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    paths = result.write(out_dir)
    print(f"ok: {name} -> {', '.join(p.name for p in paths)}")
    return 0


def cmd_verify_chain(chain_file) -> int:
    try:
        with open(chain_file, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        print(f"error: cannot read chain: {exc}", file=sys.stderr)
        return 2
    try:
        suite, blocks = parse_chain_file(data)
    except WireError as exc:
        print(f"error: corrupt chain file: {exc}", file=sys.stderr)
        return 2
    failure = verify_chain(blocks, suite)
    if failure is None:
        print(f"ok: {len(blocks)} blocks verified")
        return 0
    where = f"block {failure.height}" + (f" tx {failure.tx_index}" if failure.tx_index is not None else "")
    print(f"FAIL at {where}: {failure.reason.value}" + (f" ({failure.detail})" if failure.detail else ""))
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavidbc", description="UAV identity blockchain simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the scenario's seed")
    r.add_argument("--out", required=True)

    pr = sub.add_parser("preset", help="run an experiment preset")
    pr.add_argument("--name", required=True, help=", ".join(PRESETS))
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.add_argument("--workers", type=int, default=1, help="worker threads for sweeps")

    v = sub.add_parser("verify-chain", help="replay and check an exported chain")
    v.add_argument("--file", required=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UAVIDBC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.scenario, args.seed, args.out)
    if args.command == "preset":
        return cmd_preset(args.name, args.seed, args.out, args.workers)
    return cmd_verify_chain(args.file)


if __name__ == "__main__":
    sys.exit(main())
