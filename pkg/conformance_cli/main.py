# tzcvm_sim/conformance_cli/main.py

import logging
import tempfile
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from attestation.keys import Platform
from attestation.token import verify_token
from host_sim.errors import HostError
from mem_model.granules import MappingPolicy
from shadow_sync.ledger import COUNTERS
from tmm_core.trace import TraceWriter
from tmm_core.types import TmiStatus

from .bench import BENCH_RUNNERS, bench_table
from .cases import CaseContext, coverage_of, select
from .config import settings
from .errors import CaseFailure, CaseSkipped, ScenarioError
from .report import FAIL, PASS, SKIP, CaseResult, Report
from .scenario import CVmSpec, Scenario, load_scenario
from .simulation import Simulation, rot_seed_for, token_from_trace

logger = logging.getLogger(__name__)


def _sum_counters(snapshots: List[Dict[str, int]]) -> Dict[str, int]:
    return {name: sum(s.get(name, 0) for s in snapshots) for name in COUNTERS}


# ─── Conformance ─────────────────────────────────────────────────────────────
def run_conformance(
    pattern: Optional[str] = None,
    parallel_cpus: Optional[int] = None,
    seed: Optional[int] = None,
) -> Report:
    """Run every built-in case matching `pattern` (id substring or category)."""
    cpus = parallel_cpus or settings.parallel_cpus
    seed = settings.seed if seed is None else seed
    report = Report("conformance")
    chosen = select(pattern)
    if not chosen:
        report.errors.append(f"no case matches {pattern!r}")
        return report

    settings.work_dir.mkdir(parents=True, exist_ok=True)
    sims: List[Simulation] = []
    with tempfile.TemporaryDirectory(dir=settings.work_dir) as scratch:
        for spec in chosen:
            ctx = CaseContext(spec.id, Path(scratch), cpus, seed)
            started = time.perf_counter()
            try:
                spec.run(ctx)
                outcome, detail = PASS, ""
            except CaseSkipped as exc:
                outcome, detail = SKIP, str(exc)
            except CaseFailure as exc:
                outcome, detail = FAIL, str(exc)
            except (HostError, ScenarioError, ValueError, KeyError) as exc:
                logger.exception("Case %s raised", spec.id)
                outcome, detail = FAIL, f"{type(exc).__name__}: {exc}"
            elapsed = time.perf_counter() - started
            sims.extend(ctx.sims)
            report.cases.append(CaseResult(
                spec.id, spec.category, outcome, detail, round(elapsed, 4),
                _sum_counters([s.monitor.ledger.snapshot() for s in ctx.sims]),
            ))
            log = logger.info if outcome != FAIL else logger.error
            log("[%s] %s %s", outcome.upper(), spec.id, detail)

    report.coverage = coverage_of(sims)
    report.counters = _sum_counters([s.monitor.ledger.snapshot() for s in sims])
    report.summary = {"cases": len(chosen), "parallel_cpus": cpus, "seed": seed, **report.tally()}
    if pattern is None:
        for kind in ("tmi", "tsi"):
            missing = report.coverage[f"{kind}_missing"]
            if missing:
                report.errors.append(f"{kind.upper()} never exercised: {', '.join(missing)}")
    logger.info("Conformance: %s", report.tally())
    return report


# ─── Benches ─────────────────────────────────────────────────────────────────
def run_bench(name: str) -> Report:
    names = sorted(BENCH_RUNNERS) if name == "all" else [name]
    report = Report("bench")
    for bench in names:
        table = bench_table(bench)
        report.add_table(bench, table)
        if bench == "memcpy" and not table["within_tolerance"].all():
            report.errors.append("memcpy model misses a reference cell by more than the tolerance")
    report.summary = {"benches": names}
    return report


# ─── Scenarios ───────────────────────────────────────────────────────────────
def _platform_for(scenario: Scenario) -> Platform:
    spec = scenario.platform
    return Platform(
        rot_seed=bytes.fromhex(spec.rot_seed) if spec.rot_seed else rot_seed_for(scenario.seed),
        firmware_digest=bytes.fromhex(spec.firmware_digest) if spec.firmware_digest else None,
        platform_info=spec.platform_info,
    )


def _contains(trace: List[dict], entry: Dict[str, Any]) -> bool:
    return any(all(e.get(k) == v for k, v in entry.items()) for e in trace)


def _run_cvm(sim: Simulation, spec: CVmSpec, scenario: Scenario, out_dir: Path) -> CaseResult:
    started = time.perf_counter()
    problems: List[str] = []
    io_ipa = spec.io.ipa if spec.io else None
    cvm_id = sim.host.boot_cvm(
        spec.image_pages(), spec.cvm_params(), [t.to_params() for t in spec.tecs],
        io_ipa=io_ipa,
        io_pages=spec.io.pages if spec.io else None,
        queue_size=spec.io.queue_size if spec.io else None,
        responder=spec.responder_table(),
        blk_image=out_dir / f"{spec.name}.blk" if spec.io else None,
    )
    if spec.io and spec.io.protect:
        status = sim.monitor.protect_io_pages(cvm_id, spec.io.protect)
        if status is not TmiStatus.SUCCESS:
            problems.append(f"protect_io_pages returned {status.name}")
    measurement = sim.monitor.cvms[cvm_id].initial_measurement
    blk = sim.host.cvms[cvm_id].devices.get("blk")

    run = sim.host.run(cvm_id, max_steps=scenario.host.max_steps, interrupts=spec.interrupt_schedule())
    problems += sim.memory.scan_invariants() + sim.monitor.scan_ttt_soundness()
    if "FIQ" in run.exits:
        problems.append("an exit reported FIQ to the host")

    exp = spec.expect
    if exp.final_state is not None and run.final_state != exp.final_state.value:
        problems.append(f"final state {run.final_state}, expected {exp.final_state.value}")
    if exp.deadlock is not None and run.deadlock != exp.deadlock:
        problems.append(f"deadlock={run.deadlock}, expected {exp.deadlock}")
    for want in exp.trace_contains:
        if not _contains(run.guest_traces.get(want.vcpu, []), want.entry):
            problems.append(f"vCPU {want.vcpu} trace lacks {want.entry}")
    for counter in exp.counters_zero:
        if run.counters.get(counter, 0):
            problems.append(f"counter {counter} = {run.counters[counter]}, expected 0")
    if exp.blk_contains is not None:
        sector, data = exp.blk_contains
        expected = bytes.fromhex(data)
        if blk is None or blk.backend.read(sector, len(expected)) != expected:
            problems.append(f"blk sector {sector} does not hold {data}")

    note = ""
    if spec.attest is not None:
        token = token_from_trace(run.guest_traces.get(spec.attest.vcpu, []))
        verdict = verify_token(token, sim.platform.keys.rak_public, measurement,
                               bytes.fromhex(spec.attest.challenge))
        token_path = out_dir / f"{spec.name}.token"
        token_path.write_bytes(token)
        note = f"token written to {token_path}"
        if verdict.accepted != spec.attest.expect_accept:
            problems.append(f"attestation verdict {verdict.accepted} ({verdict.reason}), "
                            f"expected {spec.attest.expect_accept}")

    outcome = FAIL if problems else PASS
    logger.info("[%s] cVM %s: %d entries, exits %s", outcome.upper(), spec.name, run.steps, run.exits)
    counters = dict(run.counters, steps=run.steps)
    return CaseResult(spec.name, "scenario", outcome, "; ".join(problems) or note,
                      round(time.perf_counter() - started, 4), counters)


def run_scenario(
    source: Union[str, Path, Scenario],
    seed: Optional[int] = None,
    policy: Optional[MappingPolicy] = None,
    trace_path: Optional[Union[str, Path]] = None,
) -> Report:
    """Boot and run every cVM of a scenario file on one platform."""
    scenario = source if isinstance(source, Scenario) else load_scenario(source)
    scenario = scenario.with_overrides(seed=seed, policy=policy)
    trace = TraceWriter(trace_path) if trace_path else TraceWriter()
    platform = _platform_for(scenario)
    out_dir = settings.work_dir / scenario.name
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = Simulation.build(
        policy=scenario.memory.policy,
        granules=scenario.memory.granules,
        tzasc=scenario.memory.tzasc_config(),
        seed=scenario.seed,
        platform=platform,
        host_policy=scenario.host.policy(scenario.memory.policy),
        trace=trace,
        features=scenario.platform.features,
        blk_dir=out_dir,
    )
    rak_path = out_dir / "rak.pub"
    rak_path.write_text(platform.keys.rak_public.hex() + "\n", encoding="utf-8")

    report = Report("scenario")
    try:
        for spec in scenario.cvms:
            try:
                report.cases.append(_run_cvm(sim, spec, scenario, out_dir))
            except HostError as exc:
                logger.error("cVM %s did not boot: %s", spec.name, exc)
                report.cases.append(CaseResult(spec.name, "scenario", FAIL, str(exc)))
    finally:
        trace.close()

    report.counters = sim.monitor.ledger.snapshot()
    report.events = [asdict(e) for e in sim.host.events]
    report.summary = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "policy": scenario.memory.policy.value,
        "tmi_records": len(trace.responses()),
        "rak_public": str(rak_path),
        **report.tally(),
    }
    if trace_path:
        report.summary["trace"] = str(trace_path)
    return report


# ─── Attestation ─────────────────────────────────────────────────────────────
def _read_key(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii").strip()
        return bytes.fromhex(text)
    except (UnicodeDecodeError, ValueError):
        return raw


def verify_attestation(
    token_path: Union[str, Path],
    rak_path: Union[str, Path],
    measurement: Optional[str] = None,
    challenge: Optional[str] = None,
) -> Report:
    """Check a token file against a trusted root attestation key file."""
    report = Report("attest")
    try:
        token = Path(token_path).read_bytes()
        rak = _read_key(rak_path)
    except OSError as exc:
        report.errors.append(str(exc))
        return report
    verdict = verify_token(
        token, rak,
        bytes.fromhex(measurement) if measurement else None,
        bytes.fromhex(challenge) if challenge else None,
    )
    report.summary = {
        "token": str(token_path),
        "accepted": verdict.accepted,
        "reason": verdict.reason.value if verdict.reason else None,
        "detail": verdict.detail,
    }
    if not verdict:
        report.errors.append(f"token rejected: {verdict.reason.value}")
    logger.info("Token %s: %s", token_path, "accepted" if verdict else verdict.reason.value)
    return report
