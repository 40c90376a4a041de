# tzcvm_sim/orchestrator.py

from __future__ import annotations

# ─── Load environment variables from .env ────────────────────────────────
from dotenv import load_dotenv

load_dotenv()  # TZCVM_* overrides must be in os.environ before any settings object is built

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from conformance_cli.config import BENCHES, CATEGORIES, settings
from conformance_cli.errors import ParseError, ScenarioError
from conformance_cli.main import run_bench, run_conformance, run_scenario, verify_attestation
from conformance_cli.replay import replay_trace
from conformance_cli.report import Report, render_cases, render_table
from mem_model.granules import MappingPolicy


# ─── Logging ──────────────────────────────────────────────────────────────────
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s: %(message)s")
logger = logging.getLogger(__name__)


# ─── Argument parsing ─────────────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tzcvm-sim",
        description="TrustZone confidential-VM monitor simulator: conformance, benches, scenarios, attestation.",
    )
    parser.add_argument("--report", type=Path, default=settings.report_path, help="JSON report path")
    parser.add_argument("--trace", type=Path, default=settings.trace_path, help="JSON-lines TMI trace path")
    parser.add_argument("--parallel-cpus", type=int, default=settings.parallel_cpus,
                        help="simulated CPUs for the race cases")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    conf = sub.add_parser("conformance", help="run the built-in conformance cases")
    conf.add_argument("--filter", dest="pattern", default=None,
                      help=f"category ({', '.join(CATEGORIES)}) or case id substring")
    conf.add_argument("--seed", type=int, default=None)

    bench = sub.add_parser("bench", help="latency model vs reference figures")
    bench.add_argument("name", choices=BENCHES + ("all",))

    run = sub.add_parser("run", help="boot and run a scenario file")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--policy", choices=[p.value for p in MappingPolicy], default=None)

    replay = sub.add_parser("replay", help="re-run a recorded TMI trace against a fresh monitor")
    replay.add_argument("trace_file", type=Path)

    attest = sub.add_parser("attest", help="attestation tooling")
    attest_sub = attest.add_subparsers(dest="attest_command", required=True)
    verify = attest_sub.add_parser("verify", help="verify a token against a root attestation key")
    verify.add_argument("token", type=Path)
    verify.add_argument("rak_public", type=Path)
    verify.add_argument("--measurement", default=None, help="expected initial measurement (hex)")
    verify.add_argument("--challenge", default=None, help="expected challenge (hex)")
    return parser


# ─── Commands ─────────────────────────────────────────────────────────────────
def _dispatch(args: argparse.Namespace) -> Report:
    if args.command == "conformance":
        report = run_conformance(args.pattern, args.parallel_cpus, args.seed)
        print(render_cases(report))
        return report
    if args.command == "bench":
        report = run_bench(args.name)
        for name, records in report.bench.items():
            print(render_table(records, title=f"\n== {name} =="))
        return report
    if args.command == "run":
        report = run_scenario(args.scenario, args.seed, args.policy and MappingPolicy(args.policy), args.trace)
        print(render_cases(report))
        return report
    if args.command == "replay":
        result = replay_trace(args.trace_file)
        report = Report("replay", summary=result.to_dict())
        if not result.identical:
            report.errors.append(f"{len(result.mismatches)} response(s) differ from the recording")
        print(f"{result.commands} TMI(s) replayed: {'identical' if result.identical else 'MISMATCH'}")
        return report
    report = verify_attestation(args.token, args.rak_public, args.measurement, args.challenge)
    print("accepted" if report.passed else f"rejected: {report.summary.get('reason')}")
    return report


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        report = _dispatch(args)
    except ParseError as exc:
        logger.error("%s", exc)
        return 2
    except (ScenarioError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    report.write(args.report)
    for error in report.errors:
        logger.error("%s", error)
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
