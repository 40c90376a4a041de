# tzcvm_sim/conformance_cli/cases.py
"""
Built-in conformance cases.

Every case builds its own simulated platform(s), drives them through the
host and raw TMIs, and raises CaseFailure on the first property that does
not hold. Cases register themselves with `@case` in the order they are
listed in the report.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from attestation.token import verify_token
from host_sim import guest as g
from host_sim.config import IPI_SGI, TIMER_INTID, HostPolicy, InjectionMode
from host_sim.config import settings as host_settings
from host_sim.cpu_runner import CpuPool
from host_sim.gic import sgir_value
from host_sim.virtio import QUEUES, IoLayout, blk_header, blk_request, queue_pages
from mem_model.config import GRANULE_SIZE
from mem_model.errors import AccessFault
from mem_model.granules import ASSIGNED_STATES, GranuleState, MappingPolicy, Requestor
from tmm_core.config import GICD_OFFSET, GICD_SGIR
from tmm_core.ttt import BlockEntry
from tmm_core.types import CVmParams, CVmState, TecParams, TmiCommand, TmiRequest, TmiResponse, TmiStatus
from tsi_services.config import TSI_FUNCTIONS

from .config import settings
from .errors import CaseFailure, CaseSkipped
from .simulation import Simulation, token_from_trace

logger = logging.getLogger(__name__)

PAGE = GRANULE_SIZE
UNPROTECTED = 1 << 39           # first unprotected IPA under the default params
IO_IPA = 0x100000
CHALLENGE = bytes(range(64))
PAYLOAD = b"tzcvm blk payload"


# ─── Case registry ───────────────────────────────────────────────────────────
@dataclass
class CaseContext:
    case_id: str
    work_dir: Path
    parallel_cpus: int = 1
    seed: int = 0
    sims: List[Simulation] = field(default_factory=list)

    def simulation(self, policy: MappingPolicy = MappingPolicy.DIRECT, **host: object) -> Simulation:
        """A fresh platform; keyword arguments go to the host policy."""
        policy = MappingPolicy(policy)
        sim = Simulation.build(
            policy=policy,
            seed=self.seed,
            host_policy=HostPolicy(mapping_policy=policy, **host),
            blk_dir=self.work_dir / self.case_id / f"sim{len(self.sims)}",
        )
        self.sims.append(sim)
        return sim


CaseFn = Callable[[CaseContext], None]


@dataclass(frozen=True)
class ConformanceCase:
    id: str
    category: str
    description: str
    run: CaseFn


CASES: List[ConformanceCase] = []


def case(case_id: str, category: str, description: str) -> Callable[[CaseFn], CaseFn]:
    def register(fn: CaseFn) -> CaseFn:
        CASES.append(ConformanceCase(case_id, category, description, fn))
        return fn
    return register


def select(pattern: Optional[str] = None) -> List[ConformanceCase]:
    """Cases whose id or category contains `pattern` (all when None)."""
    if not pattern:
        return list(CASES)
    return [c for c in CASES if pattern in c.id or pattern == c.category]


# ─── Helpers ─────────────────────────────────────────────────────────────────
def check(condition: bool, message: str) -> None:
    if not condition:
        raise CaseFailure(message)


def expect(resp: TmiResponse, status: TmiStatus, what: str) -> TmiResponse:
    check(resp.status is status, f"{what}: expected {status.name}, got {resp.status.name}")
    return resp


def sound(sim: Simulation, where: str) -> None:
    problems = sim.memory.scan_invariants() + sim.monitor.scan_ttt_soundness()
    check(not problems, f"{where}: {problems[:3]}")


def program(*instructions: g.Instruction) -> TecParams:
    return TecParams(program=g.GuestProgram.of(*instructions))


def descriptors(triples: Sequence[Tuple[int, int, bool]]) -> List[g.Descriptor]:
    return [g.Descriptor(ipa=ipa, length=length, device_writes=writes) for ipa, length, writes in triples]


def io_layout(ipa: int = IO_IPA) -> IoLayout:
    pages = len(QUEUES) * queue_pages(host_settings.queue_size) + host_settings.io_data_pages
    return IoLayout.for_pages(ipa, pages, host_settings.queue_size)


@contextmanager
def staged(sim: Simulation, data: bytes) -> Iterator[Tuple[int, int]]:
    base, pages = sim.host.ns.stage(data)
    try:
        yield base, pages
    finally:
        sim.host.ns.release(base, pages)


def create_raw(sim: Simulation, params: Optional[CVmParams] = None, granules: int = 64) -> int:
    with staged(sim, (params or CVmParams()).to_page()) as (base, _):
        return expect(sim.monitor.tmi(TmiCommand.CREATE_CVM, base, granules), TmiStatus.SUCCESS,
                      "create_cvm").result(0)


def add_tec(sim: Simulation, cvm_id: int, tec: Optional[TecParams] = None) -> TmiResponse:
    with staged(sim, (tec or program(g.Halt())).to_pages()) as (base, pages):
        return sim.monitor.tmi(TmiCommand.TEC_CREATE, cvm_id, base, pages)


def add_tables(sim: Simulation, cvm_id: int, ipa: int) -> None:
    for level in (1, 2, 3):
        expect(sim.monitor.tmi(TmiCommand.CREATE_TTT, cvm_id, ipa, level), TmiStatus.SUCCESS,
               f"create_ttt({ipa:#x}, {level})")


def tsi_entries(trace: Sequence[dict], function: str) -> List[dict]:
    return [e for e in trace if e.get("tsi") == function]


def virqs(trace: Sequence[dict]) -> List[int]:
    return [e["virq"] for e in trace if "virq" in e]


def reads(trace: Sequence[dict]) -> List[str]:
    return [e["data"] for e in trace if "read" in e and "data" in e]


def expected_measurement(params: CVmParams, tecs: Sequence[TecParams], image: Dict[int, bytes]) -> bytes:
    """Hash fold of the boot sequence, computed without the monitor."""
    current = hashlib.sha256(params.encode()).digest()
    events = [(2, i, hashlib.sha256(t.encode()).digest()) for i, t in enumerate(tecs)]
    events += [(1, ipa, hashlib.sha256(image[ipa].ljust(PAGE, b"\0")).digest()) for ipa in sorted(image)]
    for kind, ipa, digest in events:
        current = hashlib.sha256(current + struct.pack("<BQ", kind, ipa) + digest).digest()
    return current


# ─── Multi-core ──────────────────────────────────────────────────────────────
@case("multicore-psci-cpu-on", "multi-core", "PSCI CPU_ON brings up a secondary vCPU; bad targets are denied")
def _psci_cpu_on(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    boot = program(
        g.PsciCall(function="cpu_on", target=1),
        g.ComputeTicks(ticks=300),
        g.PsciCall(function="cpu_on", target=1),
        g.PsciCall(function="cpu_on", target=0),
        g.PsciCall(function="cpu_on", target=5),
        g.Halt(),
    )
    secondary = program(g.TsiCall(function="version"), g.PsciCall(function="cpu_off"))
    cvm = sim.host.boot_cvm([(0, b"smp")], CVmParams(vcpu_count=2), [boot, secondary])
    report = sim.host.run(cvm)
    check(report.destroyed and report.final_state == CVmState.NULL.value, f"run ended {report.final_state}")
    outcomes = [(e["target"], e["outcome"]) for e in report.guest_traces[0] if e.get("psci") == "cpu_on"]
    check(outcomes == [(1, "SUCCESS"), (1, "SUCCESS"), (0, "DENIED"), (5, "DENIED")],
          f"cpu_on outcomes {outcomes}")
    check(len(tsi_entries(report.guest_traces[1], "version")) == 2, "secondary did not run twice")
    sound(sim, "after run")


@case("multicore-virtual-ipi", "multi-core", "A virtual IPI costs exactly two interrupt-emulation round trips")
def _virtual_ipi(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    sgir = CVmParams().mmio_base + GICD_OFFSET + GICD_SGIR
    sender = program(
        g.PsciCall(function="cpu_on", target=1),
        g.ComputeTicks(ticks=50),
        g.MmioWrite(ipa=sgir, value=sgir_value([1], IPI_SGI)),
        g.Wfi(),
    )
    receiver = program(g.Wfi(), g.TsiCall(function="version"), g.PsciCall(function="system_off"))
    cvm = sim.host.boot_cvm([(0, b"ipi")], CVmParams(vcpu_count=2), [sender, receiver])
    report = sim.host.run(cvm)
    check(report.destroyed, f"run ended {report.final_state} (deadlock={report.deadlock})")
    check(virqs(report.guest_traces[1]) == [IPI_SGI], f"receiver saw {virqs(report.guest_traces[1])}")
    check(report.counters["interrupt_emulation"] == 2,
          f"{report.counters['interrupt_emulation']} interrupt-emulation round trips")
    check(report.counters["lr_writes"] >= len(virqs(report.guest_traces[1])), "vIRQ without an LR write")
    check("FIQ" not in report.exits, "an FIQ reached the host")


# ─── Races ───────────────────────────────────────────────────────────────────
def _need_cpus(ctx: CaseContext) -> int:
    if ctx.parallel_cpus < 2:
        raise CaseSkipped("needs --parallel-cpus >= 2")
    return ctx.parallel_cpus


@case("race-concurrent-create", "race", "Concurrent create/destroy from several CPUs keeps regions disjoint")
def _concurrent_create(ctx: CaseContext) -> None:
    cpus = _need_cpus(ctx)
    sim = ctx.simulation()
    pool = CpuPool(sim.monitor, timeout=settings.case_timeout_s)
    with staged(sim, CVmParams().to_page()) as (params, _):
        create = TmiRequest(int(TmiCommand.CREATE_CVM), (params, 8))
        responses = pool.run(per_cpu=[[create, create] for _ in range(cpus)])
    flat = [r for cpu in responses for r in cpu]
    check(all(r.ok for r in flat), f"create statuses {[r.status.name for r in flat]}")
    ids = [r.result(0) for r in flat]
    check(len(set(ids)) == len(ids), f"duplicate cVM ids {ids}")
    sound(sim, "after concurrent create")
    responses = pool.run(per_cpu=[
        [TmiRequest(int(TmiCommand.DESTROY_CVM), (cvm_id,)) for cvm_id in ids[cpu::cpus]] for cpu in range(cpus)
    ])
    check(all(r.ok for cpu in responses for r in cpu), "a concurrent destroy failed")
    check(not sim.monitor.cvms, f"cVMs left: {sorted(sim.monitor.cvms)}")
    leftovers = [i for i, (state, owner) in sim.memory.snapshot_owners().items()
                 if owner is not None or state in ASSIGNED_STATES]
    check(not leftovers, f"granules still owned: {leftovers[:5]}")
    sound(sim, "after concurrent destroy")


@case("race-enter-vs-destroy", "race", "tec_enter racing destroy either runs or is refused, never half-way")
def _enter_vs_destroy(ctx: CaseContext) -> None:
    _need_cpus(ctx)
    sim = ctx.simulation()
    cvm = sim.host.boot_cvm([(0, bytes([0xA5]) * PAGE)], CVmParams(),
                            [program(g.ComputeTicks(ticks=1_000_000))])
    tec = sim.host.cvms[cvm].vcpus[0].tec_id
    owned = sim.memory.owned_by(cvm)
    enter = TmiRequest(int(TmiCommand.TEC_ENTER), (tec, 50))
    entries, destroy = CpuPool(sim.monitor, timeout=settings.case_timeout_s).run(per_cpu=[
        [enter] * 40,
        [TmiRequest(int(TmiCommand.DESTROY_CVM), (cvm,))],
    ])
    check(destroy[0].ok, f"destroy returned {destroy[0].status.name}")
    statuses = [r.status for r in entries]
    first_refusal = next((i for i, s in enumerate(statuses) if s is not TmiStatus.SUCCESS), len(statuses))
    check(all(s is not TmiStatus.SUCCESS for s in statuses[first_refusal:]),
          "tec_enter succeeded after a refusal")
    check(sim.monitor.state_of(cvm) is CVmState.NULL, "cVM survived destroy")
    dirty = [i for i in owned if not sim.memory.granule(i).is_zero() or sim.memory.granule(i).owner is not None]
    check(not dirty, f"granules not scrubbed: {dirty[:5]}")
    sim.host.cvms.pop(cvm, None)
    sound(sim, "after race")


@case("race-parallel-vcpus", "race", "Two vCPUs driven from separate CPU threads run to system off")
def _parallel_vcpus(ctx: CaseContext) -> None:
    _need_cpus(ctx)
    sim = ctx.simulation()
    primary = program(g.PsciCall(function="cpu_on", target=1), g.ComputeTicks(ticks=500), g.Wfi())
    secondary = program(g.ComputeTicks(ticks=500), g.TsiCall(function="version"), g.Halt())
    cvm = sim.host.boot_cvm([(0, b"par")], CVmParams(vcpu_count=2), [primary, secondary])
    report = sim.host.run_concurrent(cvm, entries_per_vcpu=512)
    check(report.exits.get("SYSTEM_OFF") == 1, f"exits {report.exits}")
    check(report.destroyed and report.final_state == CVmState.NULL.value, f"final state {report.final_state}")
    check(len(tsi_entries(report.guest_traces[1], "version")) == 1, "secondary vCPU did not run")
    sound(sim, "after concurrent run")


# ─── Input sanity ────────────────────────────────────────────────────────────
@case("input-malformed-tmi", "input-sanity", "Unknown commands, wrong arity and oversized arguments are rejected")
def _malformed_tmi(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    cvm = create_raw(sim)
    tec = expect(add_tec(sim, cvm), TmiStatus.SUCCESS, "tec_create").result(0)
    before = sim.memory.snapshot_owners()
    bad = [
        ("unknown command", TmiRequest(0x1FF, ())),
        ("create with one argument", TmiRequest(int(TmiCommand.CREATE_CVM), (1,))),
        ("create with three arguments", TmiRequest(int(TmiCommand.CREATE_CVM), (1, 2, 3))),
        ("argument above 2^64-1", TmiRequest(int(TmiCommand.CREATE_CVM), (1 << 64, 2))),
        ("negative argument", TmiRequest(int(TmiCommand.DESTROY_CVM), (-1,))),
        ("unknown cVM", TmiRequest(int(TmiCommand.DESTROY_CVM), (999,))),
        ("unknown TEC", TmiRequest(int(TmiCommand.TEC_ENTER), (999,))),
        ("PSCI completion without a request", TmiRequest(int(TmiCommand.PSCI_COMPLETE), (tec, tec, 0))),
        ("PSCI completion with a bad outcome", TmiRequest(int(TmiCommand.PSCI_COMPLETE), (tec, tec, 9))),
    ]
    for what, request in bad:
        expect(mon.dispatch(request), TmiStatus.ERROR_INPUT, what)
    check(sim.memory.snapshot_owners() == before, "a rejected TMI changed granule ownership")
    expect(mon.tmi(TmiCommand.DESTROY_CVM, cvm), TmiStatus.SUCCESS, "destroy")
    sound(sim, "after rejected TMIs")


@case("input-create-params", "input-sanity", "create_cvm validates the parameter page and the granule budget")
def _create_params(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    with staged(sim, bytes(PAGE)) as (zeros, _):
        expect(mon.tmi(TmiCommand.CREATE_CVM, zeros, 8), TmiStatus.ERROR_INPUT, "params without magic")
    expect(mon.tmi(TmiCommand.CREATE_CVM, 0, 8), TmiStatus.ERROR_INPUT, "params in secure memory")
    expect(mon.tmi(TmiCommand.CREATE_CVM, len(sim.memory), 8), TmiStatus.ERROR_INPUT, "params beyond memory")
    rejected = {
        "feature outside the platform": CVmParams(feature_mask=0x2),
        "protected range into the MMIO window": CVmParams(ipa_width=32, protected_ipa_limit=1 << 32),
        "zero vCPUs": CVmParams(vcpu_count=0),
        "unknown hash algorithm": CVmParams(hash_algo=7),
    }
    for what, params in rejected.items():
        with staged(sim, params.to_page()) as (base, _):
            expect(mon.tmi(TmiCommand.CREATE_CVM, base, 8), TmiStatus.ERROR_INPUT, what)
    with staged(sim, CVmParams().to_page()) as (base, _):
        expect(mon.tmi(TmiCommand.CREATE_CVM, base, 1), TmiStatus.ERROR_INPUT, "single-granule region")
        expect(mon.tmi(TmiCommand.CREATE_CVM, base, 1_000_000), TmiStatus.ERROR_MEMORY, "oversized region")
        cvm = expect(mon.tmi(TmiCommand.CREATE_CVM, base, 8), TmiStatus.SUCCESS, "valid params").result(0)
    check(mon.state_of(cvm) is CVmState.NEW, f"new cVM is {mon.state_of(cvm).value}")
    expect_policy = mon.delegate(len(sim.memory) - 1)
    check(expect_policy is TmiStatus.ERROR_POLICY, f"delegate under the direct policy gave {expect_policy.name}")
    expect(mon.tmi(TmiCommand.DESTROY_CVM, cvm), TmiStatus.SUCCESS, "destroy")

    dynamic = ctx.simulation(MappingPolicy.DYNAMIC)
    with staged(dynamic, CVmParams().to_page()) as (base, _):
        expect(dynamic.monitor.tmi(TmiCommand.CREATE_CVM, base, 8), TmiStatus.ERROR_MEMORY,
               "create with nothing delegated")
    sound(sim, "direct")
    sound(dynamic, "dynamic")


@case("input-lifecycle-order", "input-sanity", "Commands issued in the wrong lifecycle state are refused")
def _lifecycle_order(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    cvm = create_raw(sim)
    expect(mon.tmi(TmiCommand.ACTIVATE_CVM, cvm), TmiStatus.ERROR_STATE, "activate without a TEC")
    tec = expect(add_tec(sim, cvm), TmiStatus.SUCCESS, "tec_create").result(0)
    expect(add_tec(sim, cvm), TmiStatus.ERROR_INPUT, "TEC beyond vcpu_count")
    expect(mon.tmi(TmiCommand.TEC_DESTROY, tec), TmiStatus.SUCCESS, "tec_destroy while NEW")
    with staged(sim, program(g.Halt()).to_pages()) as (base, _):
        expect(mon.tmi(TmiCommand.TEC_CREATE, cvm, base, 0), TmiStatus.ERROR_INPUT, "TEC params of 0 pages")
        expect(mon.tmi(TmiCommand.TEC_CREATE, cvm, base, 17), TmiStatus.ERROR_INPUT, "TEC params of 17 pages")
    tec = expect(add_tec(sim, cvm), TmiStatus.SUCCESS, "tec_create again").result(0)

    add_tables(sim, cvm, 0)
    with staged(sim, b"measured page") as (src, _):
        expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, 0x1000, src), TmiStatus.SUCCESS, "data_create")
        expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, 0x1000, src), TmiStatus.ERROR_INPUT, "data_create twice")
        expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, 0x1001, src), TmiStatus.ERROR_INPUT, "unaligned IPA")
        expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, UNPROTECTED, src), TmiStatus.ERROR_INPUT,
               "data_create at an unprotected IPA")
    expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, 0x3000, 0), TmiStatus.ERROR_INPUT, "secure source granule")

    expect(mon.tmi(TmiCommand.ACTIVATE_CVM, cvm), TmiStatus.SUCCESS, "activate")
    expect(mon.tmi(TmiCommand.ACTIVATE_CVM, cvm), TmiStatus.ERROR_STATE, "activate twice")
    with staged(sim, b"late page") as (src, _):
        expect(mon.tmi(TmiCommand.DATA_CREATE, cvm, 0x2000, src), TmiStatus.ERROR_STATE, "measured data after activate")
    expect(add_tec(sim, cvm), TmiStatus.ERROR_STATE, "tec_create after activate")
    expect(mon.tmi(TmiCommand.TEC_DESTROY, tec), TmiStatus.ERROR_STATE, "tec_destroy while ACTIVE")
    expect(mon.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0x2000), TmiStatus.SUCCESS, "data_create_unknown")
    expect(mon.tmi(TmiCommand.DATA_DESTROY, cvm, 0x2000), TmiStatus.SUCCESS, "data_destroy")
    expect(mon.tmi(TmiCommand.DATA_DESTROY, cvm, 0x2000), TmiStatus.ERROR_INPUT, "data_destroy twice")
    sound(sim, "while ACTIVE")

    expect(mon.tmi(TmiCommand.DESTROY_CVM, cvm), TmiStatus.SUCCESS, "destroy")
    expect(mon.tmi(TmiCommand.DESTROY_CVM, cvm), TmiStatus.ERROR_INPUT, "destroy twice")
    expect(mon.tmi(TmiCommand.TEC_ENTER, tec), TmiStatus.ERROR_INPUT, "enter a destroyed TEC")
    sound(sim, "after destroy")


@case("input-tsi-services", "input-sanity", "Every guest service answers and rejects bad arguments")
def _tsi_services(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    buffer = 0x1000
    value = bytes([0xAB]) * 32
    calls = [
        g.TsiCall(function="version"),
        g.TsiCall(function="cvm_config"),
        g.TsiCall(function="measurement_read", args=[0]),
        g.TsiCall(function="measurement_read", args=[5]),
        g.TsiCall(function="measurement_extend", args=[0], data=value.hex()),
        g.TsiCall(function="measurement_extend", args=[1], data=value.hex()),
        g.TsiCall(function="measurement_read", args=[1]),
        g.TsiCall(function="attestation_token_continue", args=[buffer, 256]),
        g.TsiCall(function="attestation_token_init", data="00" * 10),
        g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex()),
    ]
    calls += [g.TsiCall(function="attestation_token_continue", args=[buffer, 256])] * 8
    calls += [g.TsiCall(function="host_call", args=[0x77, 1, 2]), g.HostCall(args=[0x78]), g.Halt()]
    cvm = sim.host.boot_cvm([(0, b"tsi"), (buffer, bytes(PAGE))], CVmParams(), [program(*calls)],
                            responder={0x77: (5, 6, 7, 8), 0x78: (9,)})
    measurement = sim.monitor.cvms[cvm].initial_measurement
    report = sim.host.run(cvm)
    trace = report.guest_traces[0]

    def statuses(function: str) -> List[str]:
        return [e["status"] for e in tsi_entries(trace, function)]

    check(tsi_entries(trace, "version")[0]["results"] == [1, 0], "version")
    check(tsi_entries(trace, "cvm_config")[0]["results"] == [40, 1, UNPROTECTED, 0, 0], "cvm_config")
    reads_ = tsi_entries(trace, "measurement_read")
    check([e["status"] for e in reads_] == ["SUCCESS", "ERROR_INPUT", "SUCCESS"], "measurement_read statuses")
    check(reads_[0]["data"] == measurement.hex(), "measurement_read(0) is not the initial measurement")
    check(reads_[2]["data"] == hashlib.sha256(bytes(32) + value).hexdigest(), "extended REM value")
    check(statuses("measurement_extend") == ["ERROR_INPUT", "SUCCESS"], "measurement_extend statuses")
    check(statuses("attestation_token_init") == ["ERROR_INPUT", "SUCCESS"], "token_init statuses")
    continues = statuses("attestation_token_continue")
    check(continues[0] == "ERROR_STATE", "token_continue before init")
    check("INCOMPLETE" in continues and continues[-1] == "SUCCESS", f"token_continue statuses {continues}")
    token = token_from_trace(trace)
    check(len(token) == tsi_entries(trace, "attestation_token_init")[1]["results"][0], "token length")
    verdict = verify_token(token, sim.platform.keys.rak_public, measurement, CHALLENGE)
    check(verdict.accepted, f"token rejected: {verdict.reason}")
    flipped = bytearray(token)
    flipped[len(token) // 2] ^= 1
    check(not verify_token(bytes(flipped), sim.platform.keys.rak_public, measurement, CHALLENGE),
          "a corrupted token verified")
    returns = [e["host_call_ret"] for e in trace if "host_call_ret" in e]
    check(returns == [[5, 6, 7, 8], [9, 0, 0, 0]], f"host call returns {returns}")
    check(report.destroyed, "guest did not halt")


# ─── Translation tables ──────────────────────────────────────────────────────
@case("ttt-missing-level", "ttt-levels", "Missing tables report the level reached; non-empty tables stay")
def _missing_level(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    cvm = create_raw(sim)

    def depth(resp: TmiResponse, level: int, what: str) -> None:
        expect(resp, TmiStatus.ERROR_INPUT, what)
        check(resp.result(0) == level, f"{what}: reported level {resp.result(0)}, expected {level}")

    depth(mon.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0), 0, "data with no tables")
    depth(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 2), 0, "level 2 without level 1")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 1), TmiStatus.SUCCESS, "level 1")
    depth(mon.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0), 1, "data with only level 1")
    depth(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 3), 1, "level 3 without level 2")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 2), TmiStatus.SUCCESS, "level 2")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 3), TmiStatus.SUCCESS, "level 3")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 3), TmiStatus.ERROR_INPUT, "level 3 twice")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 0), TmiStatus.ERROR_INPUT, "level 0")
    expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, 4), TmiStatus.ERROR_INPUT, "level 4")
    expect(mon.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0), TmiStatus.SUCCESS, "data once tables exist")
    expect(mon.tmi(TmiCommand.DESTROY_TTT, cvm, 0, 3), TmiStatus.ERROR_STATE, "destroy a non-empty table")
    expect(mon.tmi(TmiCommand.DATA_DESTROY, cvm, 0), TmiStatus.SUCCESS, "data_destroy")
    expect(mon.tmi(TmiCommand.DESTROY_TTT, cvm, 0, 3), TmiStatus.SUCCESS, "destroy the empty table")
    expect(mon.tmi(TmiCommand.DESTROY_TTT, cvm, 0, 3), TmiStatus.ERROR_INPUT, "destroy it twice")
    sound(sim, "after table churn")
    expect(mon.tmi(TmiCommand.DESTROY_CVM, cvm), TmiStatus.SUCCESS, "destroy")


@case("ttt-block-mapping", "ttt-levels", "A 2 MiB block mapping measures like 512 page mappings")
def _block_mapping(ctx: CaseContext) -> None:
    pages = 512
    content = b"".join(struct.pack("<I", i) * (PAGE // 4) for i in range(pages))

    sim = ctx.simulation(MappingPolicy.DYNAMIC)
    mon = sim.monitor
    for index in list(range(8)) + list(range(512, 1024)):
        check(mon.delegate(index) is TmiStatus.SUCCESS, f"delegate({index})")
    cvm = create_raw(sim)
    for level in (1, 2):
        expect(mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, level), TmiStatus.SUCCESS, f"level {level}")
    before = mon.ledger["tmi_calls"]
    with staged(sim, content) as (src, _):
        expect(mon.tmi(TmiCommand.DATA_BLOCK_CREATE, cvm, 0, pages, src), TmiStatus.SUCCESS, "block create")
    check(mon.ledger["tmi_calls"] - before == 1, "block create took more than one TMI")
    leaf, level = mon.cvms[cvm].ttt.leaf_at(0)
    check(isinstance(leaf, BlockEntry) and level == 2, f"leaf at 0 is {type(leaf).__name__} at level {level}")
    check(leaf.granule % pages == 0, f"block starts at unaligned granule {leaf.granule}")
    for i in (0, 1, 511):
        check(sim.memory.granule(leaf.granule + i).contents == bytearray(content[i * PAGE:(i + 1) * PAGE]),
              f"block page {i} content")
    block_measurement = mon.cvms[cvm].initial_measurement

    single = ctx.simulation()
    other = create_raw(single, granules=pages + 16)
    add_tables(single, other, 0)
    for i in range(pages):
        with staged(single, content[i * PAGE:(i + 1) * PAGE]) as (src, _):
            expect(single.monitor.tmi(TmiCommand.DATA_CREATE, other, i * PAGE, src), TmiStatus.SUCCESS,
                   f"data_create page {i}")
    check(single.monitor.cvms[other].initial_measurement == block_measurement,
          "block and per-page measurements differ")

    expect(mon.tmi(TmiCommand.DATA_BLOCK_DESTROY, cvm, 0, pages), TmiStatus.SUCCESS, "block destroy")
    freed = [sim.memory.granule(leaf.granule + i) for i in range(pages)]
    check(all(gr.state is GranuleState.DELEGATED and gr.is_zero() for gr in freed), "block not scrubbed")
    expect(mon.tmi(TmiCommand.DATA_BLOCK_CREATE_UNKNOWN, cvm, 0x200000, pages), TmiStatus.SUCCESS,
           "unmeasured block")
    leaf, level = mon.cvms[cvm].ttt.leaf_at(0x200000)
    check(isinstance(leaf, BlockEntry) and level == 2, "unmeasured block is not a level-2 block")
    resp = expect(mon.tmi(TmiCommand.DATA_BLOCK_CREATE_UNKNOWN, cvm, 0x400000, 4), TmiStatus.ERROR_INPUT,
                  "pages without a level-3 table")
    check(resp.result(0) == 2, f"reported level {resp.result(0)}")
    expect(mon.tmi(TmiCommand.DATA_BLOCK_DESTROY, cvm, 0x200000, pages), TmiStatus.SUCCESS, "destroy it")
    sound(sim, "dynamic")
    sound(single, "direct")


@case("ttt-protected-remap", "ttt-levels", "unmap/map_protected detaches and restores a page with its content")
def _protected_remap(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    cvm = sim.host.boot_cvm([(0, b"zero page"), (0x1000, b"kept across remap")], CVmParams(),
                            [program(g.MemRead(ipa=0x1000, length=17), g.Halt())])
    owned = sim.memory.owned_by(cvm)
    expect(mon.tmi(TmiCommand.UNMAP_PROTECTED, cvm, 0x1000), TmiStatus.SUCCESS, "unmap_protected")
    check(mon.cvms[cvm].ttt.resolve(0x1000) is None, "detached page still resolves")
    sound(sim, "page detached")
    expect(mon.tmi(TmiCommand.MAP_PROTECTED, cvm, 0x2000), TmiStatus.ERROR_INPUT, "map at a different IPA")
    expect(mon.tmi(TmiCommand.UNMAP_PROTECTED, cvm, UNPROTECTED), TmiStatus.ERROR_INPUT, "unmap unprotected IPA")
    expect(mon.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0x1000), TmiStatus.ERROR_INPUT, "reuse a detached IPA")
    expect(mon.tmi(TmiCommand.MAP_PROTECTED, cvm, 0x1000), TmiStatus.SUCCESS, "map_protected")
    expect(mon.tmi(TmiCommand.UNMAP_PROTECTED, cvm, 0), TmiStatus.SUCCESS, "detach page 0 for good")
    report = sim.host.run(cvm)
    check(reads(report.guest_traces[0]) == [b"kept across remap".hex()], "remapped content changed")
    check(report.destroyed, "guest did not halt")
    dirty = [i for i in owned if not sim.memory.granule(i).is_zero()]
    check(not dirty, f"detached granule not scrubbed on destroy: {dirty}")
    sound(sim, "after destroy")


# ─── Inter-world sharing ─────────────────────────────────────────────────────
@case("sharing-unprotected-window", "inter-world-sharing", "Shared NS pages reach the guest and cannot be delegated")
def _unprotected_window(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    mon = sim.monitor
    guest = program(g.MemRead(ipa=UNPROTECTED, length=4), g.MemWrite(ipa=UNPROTECTED, data=b"pong".hex()), g.Halt())
    cvm = sim.host.boot_cvm([(0, b"share")], CVmParams(), [guest])
    add_tables(sim, cvm, UNPROTECTED)
    shared = sim.host.ns.alloc(1)
    sim.host.write_ns(shared, b"ping")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, cvm, UNPROTECTED, shared), TmiStatus.SUCCESS, "map_unprotected")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, cvm, UNPROTECTED + PAGE, shared), TmiStatus.SUCCESS, "alias")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, cvm, 0x3000, shared), TmiStatus.ERROR_INPUT, "protected IPA")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, cvm, CVmParams().mmio_base, shared), TmiStatus.ERROR_INPUT,
           "MMIO IPA")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, cvm, UNPROTECTED + 2 * PAGE, 0), TmiStatus.ERROR_INPUT,
           "secure granule")
    expect(mon.tmi(TmiCommand.UNMAP_UNPROTECTED, cvm, UNPROTECTED + PAGE), TmiStatus.SUCCESS, "unmap alias")
    expect(mon.tmi(TmiCommand.UNMAP_UNPROTECTED, cvm, UNPROTECTED + PAGE), TmiStatus.ERROR_INPUT, "unmap twice")
    status = mon.delegate(shared)
    check(status is TmiStatus.ERROR_STATE, f"delegating a shared granule gave {status.name}")
    sound(sim, "window mapped")
    report = sim.host.run(cvm)
    check(reads(report.guest_traces[0]) == [b"ping".hex()], "guest did not read the host's bytes")
    check(sim.memory.read(Requestor.host(), shared, 0, 4) == b"pong", "host did not see the guest's bytes")
    sim.host.ns.release(shared)
    sound(sim, "after run")


def _blk_guest(layout: IoLayout, protect: bool) -> TecParams:
    header, status = layout.data_page(0), layout.data_page(0) + 0x800
    buf = layout.data_page(1)
    target = buf if protect else layout.data_page(2)
    steps: List[g.Instruction] = [
        g.MemWrite(ipa=status, data="ffff"),
        g.MemWrite(ipa=header, data=blk_header(True, 8).hex()),
        g.MemWrite(ipa=buf, data=PAYLOAD.hex()),
        g.VirtioSubmit(device="blk", descriptors=descriptors(blk_request(layout, header, buf, PAGE, status, True))),
        g.Wfi(),
    ]
    if protect:
        steps.append(g.MemWrite(ipa=buf, data=bytes(len(PAYLOAD)).hex()))
    steps += [
        g.MemWrite(ipa=header + 0x40, data=blk_header(False, 8).hex()),
        g.VirtioSubmit(device="blk", descriptors=descriptors(
            blk_request(layout, header + 0x40, target, PAGE, status + 1, False))),
        g.Wfi(),
        g.MemRead(ipa=target, length=len(PAYLOAD)),
        g.MemRead(ipa=status, length=2),
        g.Halt(),
    ]
    return program(*steps)


@case("sharing-virtio-blk", "inter-world-sharing", "A blk write then read round-trips through the shadow region")
def _virtio_blk(ctx: CaseContext) -> None:
    layout = io_layout()
    for policy in (MappingPolicy.DIRECT, MappingPolicy.DYNAMIC):
        sim = ctx.simulation(policy)
        cvm = sim.host.boot_cvm([(0, b"blk")], CVmParams(), [_blk_guest(layout, protect=False)], io_ipa=IO_IPA)
        backend = sim.host.cvms[cvm].devices["blk"].backend
        report = sim.host.run(cvm)
        check(report.destroyed, f"{policy.value}: guest did not finish ({report.exits})")
        check(reads(report.guest_traces[0]) == [PAYLOAD.hex(), "0000"], f"{policy.value}: read back "
              f"{reads(report.guest_traces[0])}")
        check(backend.read(8, len(PAYLOAD)) == PAYLOAD, f"{policy.value}: payload not on the device")
        check(virqs(report.guest_traces[0]) == [48, 48], f"{policy.value}: completions "
              f"{virqs(report.guest_traces[0])}")
        remaps = report.counters["stage2_map"] + report.counters["stage2_unmap"] + report.counters["tlb_flush"]
        if policy is MappingPolicy.DIRECT:
            check(remaps == 0, f"direct policy remapped stage-2 {remaps} times during I/O")
        else:
            check(report.counters["stage2_map"] >= 2, "dynamic policy synced without mapping")
        sound(sim, policy.value)


@case("sharing-shadow-encryption", "inter-world-sharing", "Protected I/O pages leave the secure side encrypted")
def _shadow_encryption(ctx: CaseContext) -> None:
    layout = io_layout()
    sim = ctx.simulation()
    cvm = sim.host.boot_cvm([(0, b"enc")], CVmParams(), [_blk_guest(layout, protect=True)], io_ipa=IO_IPA)
    status = sim.monitor.protect_io_pages(cvm, [layout.data_page(1)])
    check(status is TmiStatus.SUCCESS, f"protect_io_pages gave {status.name}")
    backend = sim.host.cvms[cvm].devices["blk"].backend
    report = sim.host.run(cvm)
    check(report.destroyed, f"guest did not finish ({report.exits})")
    stored = backend.read(8, PAGE)
    check(PAYLOAD not in stored, "plaintext reached the device")
    check(reads(report.guest_traces[0])[0] == PAYLOAD.hex(), "decrypted read-back differs")
    check(report.counters["integrity_failures"] == 0, "integrity check failed on an untampered page")
    sound(sim, "after run")


@case("sharing-net-loopback", "inter-world-sharing", "A frame sent on net TX arrives in a posted RX buffer")
def _net_loopback(ctx: CaseContext) -> None:
    layout = io_layout()
    frame = b"\xff" * 6 + b"tzcvm frame"
    rx, tx = layout.data_page(2), layout.data_page(1)
    guest = program(
        g.MemWrite(ipa=tx, data=frame.hex()),
        g.VirtioSubmit(device="net", queue=0, descriptors=[g.Descriptor(ipa=rx, length=PAGE, device_writes=True)]),
        g.VirtioSubmit(device="net", queue=1, descriptors=[g.Descriptor(ipa=tx, length=64)]),
        g.Wfi(),
        g.MemRead(ipa=rx, length=64),
        g.Halt(),
    )
    sim = ctx.simulation()
    cvm = sim.host.boot_cvm([(0, b"net")], CVmParams(), [guest], io_ipa=IO_IPA)
    report = sim.host.run(cvm)
    check(report.destroyed, f"guest did not finish ({report.exits})")
    check(reads(report.guest_traces[0]) == [frame.ljust(64, b"\0").hex()], "frame did not loop back")
    check(virqs(report.guest_traces[0]) == [49], f"completions {virqs(report.guest_traces[0])}")


# ─── Inter-cVM isolation ─────────────────────────────────────────────────────
@case("isolation-cross-access", "inter-cvm-isolation", "Neither the host nor another cVM reaches a cVM's pages")
def _cross_access(ctx: CaseContext) -> None:
    sim = ctx.simulation(fault_in_protected=False)
    mon = sim.monitor
    a = sim.host.boot_cvm([(0, b"A" * 16)], CVmParams(), [program(g.MemRead(ipa=0x5000, length=8), g.Halt())])
    b = sim.host.boot_cvm([(0, b"B" * 16)], CVmParams(), [program(g.MemRead(ipa=0, length=16), g.Halt())])
    granule_a = mon.cvms[a].ttt.resolve(0).granule
    for who in (Requestor.host(), Requestor.cvm(b)):
        try:
            sim.memory.read(who, granule_a)
        except AccessFault:
            continue
        raise CaseFailure(f"{who} read cVM {a}'s data granule")
    check(sim.memory.host_secure_touches(), "host fault was not audited")
    expect(mon.tmi(TmiCommand.MAP_UNPROTECTED, b, UNPROTECTED, granule_a), TmiStatus.ERROR_INPUT,
           "share another cVM's granule")

    report_a = sim.host.run(a)
    check(report_a.deadlock and report_a.faulted == [0], "unmapped access did not park the vCPU")
    check(report_a.final_state == CVmState.ACTIVE.value, "faulting cVM changed state")
    report_b = sim.host.run(b)
    check(reads(report_b.guest_traces[0]) == [(b"B" * 16).hex()], "cVM B read the wrong content")
    check(sim.memory.read(Requestor.tmm(), granule_a, 0, 16) == b"A" * 16, "cVM A's page changed")
    sound(sim, "after both runs")
    expect(sim.host.destroy_cvm(a), TmiStatus.SUCCESS, "destroy A")


@case("isolation-zero-on-destroy", "inter-cvm-isolation", "Every granule a cVM owned is scrubbed when it goes")
def _zero_on_destroy(ctx: CaseContext) -> None:
    for policy in (MappingPolicy.DIRECT, MappingPolicy.DYNAMIC):
        sim = ctx.simulation(policy)
        guest = program(
            g.MemWrite(ipa=0x1000, data="55" * 32),
            g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex()),
            g.Halt(),
        )
        cvm = sim.host.boot_cvm([(0, bytes([0xAA]) * 4 * PAGE)], CVmParams(), [guest], io_ipa=IO_IPA)
        owned = sim.memory.owned_by(cvm)
        shadow = sim.monitor.io_shadow(cvm)
        report = sim.host.run(cvm)
        check(report.destroyed, f"{policy.value}: guest did not halt")
        dirty = [i for i in owned if not sim.memory.granule(i).is_zero() or sim.memory.granule(i).owner is not None]
        check(not dirty, f"{policy.value}: granules left dirty or owned: {dirty[:5]}")
        settled = GranuleState.SECURE_FREE if policy is MappingPolicy.DIRECT else GranuleState.NS_FREE
        check(all(sim.memory.granule(i).state is settled for i in owned),
              f"{policy.value}: freed granules are not {settled.value}")
        check(all(sim.memory.granule(i).state is GranuleState.NS_FREE for i in shadow),
              f"{policy.value}: shadow not released")
        if policy is MappingPolicy.DYNAMIC:
            check(all(sim.memory.granule(i).is_zero() for i in shadow), "dynamic shadow not scrubbed")
        sound(sim, policy.value)


@case("isolation-measurement", "inter-cvm-isolation", "Identical images measure alike; one changed byte does not")
def _measurement(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    tec = program(g.TsiCall(function="measurement_read", args=[0]), g.Halt())
    image = {0: b"kernel" * 100, 0x1000: b"initrd" * 50}
    changed = dict(image)
    changed[0x1000] = b"initrD" + image[0x1000][6:]
    a = sim.host.boot_cvm(list(image.items()), CVmParams(), [tec])
    b = sim.host.boot_cvm(list(image.items()), CVmParams(), [tec])
    c = sim.host.boot_cvm(list(changed.items()), CVmParams(), [tec])
    m = {cvm: sim.monitor.cvms[cvm].initial_measurement for cvm in (a, b, c)}
    expected = expected_measurement(CVmParams(), [tec], image)
    check(m[a] == expected, "measurement differs from an independent fold of the boot sequence")
    check(m[a] == m[b], "identical images measured differently")
    check(m[a] != m[c], "a changed image byte left the measurement unchanged")
    report = sim.host.run(a)
    check(tsi_entries(report.guest_traces[0], "measurement_read")[0]["data"] == expected.hex(),
          "guest-visible measurement differs")
    for cvm in (b, c):
        expect(sim.host.destroy_cvm(cvm), TmiStatus.SUCCESS, f"destroy {cvm}")
    sound(sim, "after destroy")


# ─── Timer and interrupts ────────────────────────────────────────────────────
@case("timer-quantum-preemption", "timer-interrupt", "A long computation is preempted every quantum")
def _quantum(ctx: CaseContext) -> None:
    sim = ctx.simulation(quantum=100)
    cvm = sim.host.boot_cvm([(0, b"spin")], CVmParams(),
                            [program(g.ComputeTicks(ticks=1000), g.TsiCall(function="version"), g.Halt())])
    report = sim.host.run(cvm)
    check(report.exits.get("QUANTUM", 0) >= 10, f"only {report.exits.get('QUANTUM', 0)} preemptions")
    check(report.destroyed, "guest did not halt")


@case("timer-wakes-wfi", "timer-interrupt", "A timer interrupt for an idle vCPU is injected and wakes it")
def _timer_wakes(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    cvm = sim.host.boot_cvm([(0, b"wfi")], CVmParams(),
                            [program(g.Wfi(), g.TsiCall(function="version"), g.Halt())])
    report = sim.host.run(cvm, interrupts=[(1, TIMER_INTID, 0)])
    trace = report.guest_traces[0]
    check(virqs(trace) == [TIMER_INTID], f"vIRQs {virqs(trace)}")
    check(report.exits.get("IRQ") == 1, f"exits {report.exits}")
    check(report.counters["lr_writes"] == len(virqs(trace)), "vIRQ without a matching LR write")
    check(report.counters["fiq_taken"] == report.counters["interrupt_emulation"] == 1, "interrupt accounting")
    check("FIQ" not in report.exits, "an FIQ reached the host")
    check(report.destroyed, "guest did not halt")


@case("timer-lr-exhaustion", "timer-interrupt", "Interrupts beyond the list registers are retained, then delivered")
def _lr_exhaustion(ctx: CaseContext) -> None:
    sim = ctx.simulation()
    intids = [TIMER_INTID] + list(range(40, 45))
    cvm = sim.host.boot_cvm([(0, b"lrs")], CVmParams(), [program(g.ComputeTicks(ticks=1000), g.Halt())])
    report = sim.host.run(cvm, interrupts=[(0, intid, 0) for intid in intids])
    delivered = virqs(report.guest_traces[0])
    check(delivered == sorted(intids), f"delivered {delivered}")
    check(report.counters["lr_writes"] == len(intids), f"{report.counters['lr_writes']} LR writes")
    check(report.exits.get("IRQ") == 1, f"exits {report.exits}")


@case("timer-dropped-injection", "timer-interrupt", "A host that drops the timer starves only its own guest")
def _dropped(ctx: CaseContext) -> None:
    sim = ctx.simulation(injection=InjectionMode.DROP, drop_intids=frozenset({TIMER_INTID}))
    cvm = sim.host.boot_cvm([(0, b"drop")], CVmParams(), [program(g.Wfi(), g.Halt())])
    report = sim.host.run(cvm, interrupts=[(1, TIMER_INTID, 0)])
    check(report.deadlock, "guest woke without its interrupt")
    check(report.final_state == CVmState.ACTIVE.value, f"final state {report.final_state}")
    check(not virqs(report.guest_traces[0]) and report.counters["lr_writes"] == 0, "dropped interrupt injected")
    check(any(e.kind == "irq_dropped" for e in sim.host.events), "drop not logged")
    sound(sim, "after starvation")
    expect(sim.host.destroy_cvm(cvm), TmiStatus.SUCCESS, "destroy")


# ─── Coverage ────────────────────────────────────────────────────────────────
def coverage_of(sims: Sequence[Simulation]) -> Dict[str, object]:
    """TMI and TSI call counts summed over every platform the cases built."""
    tmi: Dict[str, int] = {c.name: 0 for c in TmiCommand}
    tsi: Dict[str, int] = {f: 0 for f in TSI_FUNCTIONS}
    for sim in sims:
        for command, count in sim.monitor.coverage.items():
            tmi[TmiCommand(command).name] += count
        for function, count in sim.monitor.tsi.calls.items():
            tsi[function] += count
    return {
        "tmi": tmi,
        "tsi": tsi,
        "tmi_missing": [name for name, n in tmi.items() if not n],
        "tsi_missing": [name for name, n in tsi.items() if not n],
    }
