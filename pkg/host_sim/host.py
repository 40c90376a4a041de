# tzcvm_sim/host_sim/host.py
"""
The untrusted host: boots cVMs through the TMI, schedules their TECs and
services every exit (host calls, PSCI, MMIO and virtio, interrupts).

The host only ever sees TMI responses and the shadow I/O region. It tracks
vCPU power state itself from PSCI exits rather than peeking at TEC state.
"""
from __future__ import annotations

import logging
import threading
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from mem_model.config import GRANULE_SIZE
from mem_model.granules import GranuleState, MappingPolicy, Requestor
from mem_model.memory import PhysicalMemory
from shadow_sync.sync import Direction
from tmm_core.config import GICD_OFFSET, GICD_SGIR
from tmm_core.monitor import Monitor
from tmm_core.ttt import LAST_LEVEL
from tmm_core.types import (
    CVmParams,
    CVmState,
    ExitInfo,
    ExitReason,
    PsciFunction,
    PsciOutcome,
    TecParams,
    TmiCommand,
    TmiResponse,
    TmiStatus,
)

from .config import HostPolicy, settings
from .cpu_runner import CpuPool, SimulatedCpu
from .errors import BootFailed, HostError, NoFreeListRegister
from .gic import decode_sgir
from .virtio import (
    DEVICE_INTID,
    QUEUES,
    BlkBackend,
    BlkDevice,
    Chain,
    IoLayout,
    NetDevice,
    ShadowWindow,
    VirtioDevice,
    device_for_notify,
    queue_pages,
)

logger = logging.getLogger(__name__)

_HOST = Requestor.host()
_LEVEL_SHIFT = {1: 39, 2: 30, 3: 21}       # IPA bits above which a level-n table is shared

ImagePage = Tuple[int, bytes]
ScheduledInterrupt = Tuple[int, int, int]      # (at_step, intid, vcpu index)


class BootStep(str, Enum):
    CREATE = "step1_create"
    TEC_CREATE = "step2_tec_create"
    LOAD = "step3_load"
    ACTIVATE = "step4_activate"
    RUN = "step5_run"
    EXIT = "step6_exit"
    DESTROY = "step7_destroy"


BOOT_SEQUENCE = (BootStep.CREATE, BootStep.TEC_CREATE, BootStep.LOAD, BootStep.ACTIVATE)


@dataclass(frozen=True)
class HostEvent:
    """One line of the host's append-only event log."""
    seq: int
    cvm_id: int
    kind: str
    tec_id: Optional[int] = None
    exit: Optional[dict] = None
    action: str = ""


@dataclass
class RunReport:
    cvm_id: int
    steps: int = 0
    exits: Dict[str, int] = field(default_factory=dict)
    final_state: str = CVmState.ACTIVE.value
    deadlock: bool = False
    faulted: List[int] = field(default_factory=list)
    destroyed: bool = False
    counters: Dict[str, int] = field(default_factory=dict)
    guest_traces: Dict[int, List[dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HostVcpu:
    tec_id: int
    index: int
    on: bool
    idle: bool = False
    faulted: bool = False
    results: List[int] = field(default_factory=lambda: [0, 0, 0, 0])
    retained: Deque[int] = field(default_factory=deque)


@dataclass
class HostCVm:
    cvm_id: int
    params: CVmParams
    vcpus: Dict[int, HostVcpu] = field(default_factory=dict)      # by vCPU index
    delegated: List[int] = field(default_factory=list)
    shadow: Optional[Tuple[int, int]] = None                      # dynamic shadow run (base, count)
    devices: Dict[str, VirtioDevice] = field(default_factory=dict)
    responder: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def by_tec(self, tec_id: int) -> HostVcpu:
        return next(v for v in self.vcpus.values() if v.tec_id == tec_id)


# ─── Host-side NS allocator ──────────────────────────────────────────────────
class NsAllocator:
    """Hands out NsFree granules for staging, from the top of memory down."""

    def __init__(self, memory: PhysicalMemory):
        self.memory = memory
        self.held: Set[int] = set()

    def _free(self, index: int) -> bool:
        return index not in self.held and self.memory.granule(index).state is GranuleState.NS_FREE

    def alloc(self, count: int = 1) -> int:
        run = 0
        for index in range(len(self.memory) - 1, -1, -1):
            run = run + 1 if self._free(index) else 0
            if run == count:
                self.held.update(range(index, index + count))
                return index
        raise HostError(f"no run of {count} free normal-world granules to stage into")

    def release(self, base: int, count: int = 1) -> None:
        self.held.difference_update(range(base, base + count))

    def stage(self, data: bytes) -> Tuple[int, int]:
        """Copy `data` into fresh NS granules as the host; returns (base, pages)."""
        pages = max(1, -(-len(data) // GRANULE_SIZE))
        base = self.alloc(pages)
        for i in range(pages):
            chunk = data[i * GRANULE_SIZE:(i + 1) * GRANULE_SIZE]
            self.memory.write(_HOST, base + i, chunk.ljust(GRANULE_SIZE, b"\0"))
        return base, pages


def _pages_of(image: Iterable[ImagePage]) -> Dict[int, bytes]:
    pages: Dict[int, bytes] = {}
    for ipa, data in image:
        if ipa % GRANULE_SIZE:
            raise ValueError(f"image entry at {ipa:#x} is not page aligned")
        for i in range(max(1, -(-len(data) // GRANULE_SIZE))):
            pages[ipa + i * GRANULE_SIZE] = data[i * GRANULE_SIZE:(i + 1) * GRANULE_SIZE].ljust(GRANULE_SIZE, b"\0")
    return pages


def _runs(ipas: Sequence[int], limit: int = 512) -> List[Tuple[int, int]]:
    """Consecutive page runs (start, count) of at most `limit` pages."""
    runs: List[Tuple[int, int]] = []
    for ipa in sorted(ipas):
        if runs and runs[-1][0] + runs[-1][1] * GRANULE_SIZE == ipa and runs[-1][1] < limit:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((ipa, 1))
    return runs


def _tables_for(ipas: Iterable[int]) -> List[Tuple[int, int]]:
    """(ipa, level) of every table needed to map `ipas` with page entries, parents first."""
    seen: Set[Tuple[int, int]] = set()
    out: List[Tuple[int, int]] = []
    for ipa in sorted(ipas):
        for level in range(1, LAST_LEVEL + 1):
            key = (level, ipa >> _LEVEL_SHIFT[level])
            if key not in seen:
                seen.add(key)
                out.append((ipa, level))
    return sorted(out, key=lambda t: t[1])


# ─── Host ────────────────────────────────────────────────────────────────────
class Host:
    def __init__(self, monitor: Monitor, policy: Optional[HostPolicy] = None,
                 blk_dir: Optional[Path] = None):
        self.monitor = monitor
        self.memory = monitor.memory
        self.gic = monitor.gic
        self.policy = policy or HostPolicy(mapping_policy=self.memory.policy)
        if self.policy.mapping_policy is not self.memory.policy:
            raise HostError(f"host policy {self.policy.mapping_policy.value} does not match memory "
                            f"policy {self.memory.policy.value}")
        self.ns = NsAllocator(self.memory)
        self.blk_dir = Path(blk_dir) if blk_dir is not None else settings.blk_image_dir
        self.cvms: Dict[int, HostCVm] = {}
        self.events: List[HostEvent] = []
        self._events_lock = threading.Lock()
        self._pending_delegations: List[int] = []       # delegated before the cVM id is known

    # ── Event log ───────────────────────────────────────────────────────────
    def _log(self, cvm_id: int, kind: str, tec_id: Optional[int] = None, exit_info: Optional[ExitInfo] = None,
             action: str = "") -> None:
        with self._events_lock:
            self.events.append(HostEvent(len(self.events), cvm_id, kind, tec_id,
                                         exit_info.to_dict() if exit_info is not None else None, action))

    def steps_of(self, cvm_id: int) -> List[str]:
        return [e.kind for e in self.events if e.cvm_id == cvm_id and e.kind.startswith("step")]

    def _tmi(self, command: TmiCommand, *args: int, cpu: int = 0) -> TmiResponse:
        return self.monitor.tmi(command, *args, cpu=cpu)

    # ── Dynamic policy: delegation ──────────────────────────────────────────
    def _provide(self, hc: Optional[HostCVm], count: int) -> None:
        """Delegate `count` granules ahead of monitor allocations (dynamic policy only)."""
        if self.memory.policy is not MappingPolicy.DYNAMIC:
            return
        for _ in range(count):
            index = self.ns.alloc(1)
            status = self.monitor.delegate(index)
            self.ns.release(index)
            if status is not TmiStatus.SUCCESS:
                raise BootFailed("delegate", int(status), f"delegating granule {index} failed with {status.name}")
            if hc is not None:
                hc.delegated.append(index)
            else:
                self._pending_delegations.append(index)

    # ── Boot (steps ① to ④) ────────────────────────────────────────────────
    def boot_cvm(
        self,
        image: Sequence[ImagePage],
        params: CVmParams,
        tecs: Sequence[TecParams],
        io_ipa: Optional[int] = None,
        io_pages: Optional[int] = None,
        queue_size: Optional[int] = None,
        responder: Optional[Mapping[int, Sequence[int]]] = None,
        blk_image: Optional[Path] = None,
    ) -> int:
        if not tecs or len(tecs) > params.vcpu_count:
            raise BootFailed(BootStep.TEC_CREATE.value, None, f"{len(tecs)} TEC programs for {params.vcpu_count} vCPUs")
        pages = _pages_of(image)
        queue_size = queue_size or settings.queue_size
        io_count = 0
        if io_ipa is not None:
            io_count = io_pages or (len(QUEUES) * queue_pages(queue_size) + settings.io_data_pages)
        io_ipas = [io_ipa + i * GRANULE_SIZE for i in range(io_count)] if io_count else []
        tables = _tables_for(list(pages) + io_ipas)
        needed = 2 + len(tecs) + len(tables) + len(pages) + io_count

        self._pending_delegations = []
        cvm_id: Optional[int] = None
        step = BootStep.CREATE
        try:
            # ① create
            self._provide(None, 2)
            params_granule, _ = self.ns.stage(params.to_page())
            resp = self._tmi(TmiCommand.CREATE_CVM, params_granule, needed + settings.region_slack_pages)
            self.ns.release(params_granule)
            self._check(step, resp)
            cvm_id = resp.result(0)
            hc = HostCVm(cvm_id, params, delegated=self._pending_delegations,
                         responder={k: tuple(v) for k, v in (responder or {}).items()})
            self.cvms[cvm_id] = hc
            self._log(cvm_id, step.value)
            logger.info("Boot ① created cVM %d", cvm_id)

            # ② TECs
            step = BootStep.TEC_CREATE
            self._provide(hc, len(tecs))
            for tec in tecs:
                base, count = self.ns.stage(tec.to_pages())
                resp = self._tmi(TmiCommand.TEC_CREATE, cvm_id, base, count)
                self.ns.release(base, count)
                self._check(step, resp)
                index = len(hc.vcpus)
                hc.vcpus[index] = HostVcpu(resp.result(0), index, on=index == 0)
            self._log(cvm_id, step.value)
            logger.info("Boot ② created %d TEC(s) for cVM %d", len(tecs), cvm_id)

            # ③ tables, image, I/O region
            step = BootStep.LOAD
            self._provide(hc, len(tables) + len(pages) + io_count)
            for ipa, level in tables:
                self._check(step, self._tmi(TmiCommand.CREATE_TTT, cvm_id, ipa, level))
            for start, count in _runs(list(pages)):
                data = b"".join(pages[start + i * GRANULE_SIZE] for i in range(count))
                base, staged = self.ns.stage(data)
                resp = self._tmi(TmiCommand.DATA_BLOCK_CREATE, cvm_id, start, count, base)
                self.ns.release(base, staged)
                self._check(step, resp)
            if io_count:
                self._setup_io(hc, io_ipa, io_count, queue_size, blk_image)
            self._log(cvm_id, step.value)
            logger.info("Boot ③ loaded %d image page(s) into cVM %d", len(pages), cvm_id)

            # ④ activate
            step = BootStep.ACTIVATE
            self._check(step, self._tmi(TmiCommand.ACTIVATE_CVM, cvm_id))
            self._log(cvm_id, step.value)
            logger.info("Boot ④ activated cVM %d", cvm_id)
            return cvm_id
        except BootFailed as exc:
            logger.warning("Boot failed at %s: %s", step.value, exc)
            if cvm_id is not None:
                self.destroy_cvm(cvm_id)
            else:
                self._undelegate(self._pending_delegations)
            raise

    def _check(self, step: BootStep, resp: TmiResponse) -> None:
        if not resp.ok:
            raise BootFailed(step.value, int(resp.status), f"{step.value} failed with {resp.status.name}")

    def _setup_io(self, hc: HostCVm, io_ipa: int, count: int, queue_size: int, blk_image: Optional[Path]) -> None:
        step = BootStep.LOAD
        for start, run in _runs([io_ipa + i * GRANULE_SIZE for i in range(count)]):
            self._check(step, self._tmi(TmiCommand.DATA_BLOCK_CREATE_UNKNOWN, hc.cvm_id, start, run))
        shadow_base = None
        if self.memory.policy is MappingPolicy.DYNAMIC:
            shadow_base = self.ns.alloc(count)
            hc.shadow = (shadow_base, count)
        status = self.monitor.register_io(hc.cvm_id, io_ipa, count, queue_size, shadow_base)
        if shadow_base is not None:
            self.ns.release(shadow_base, count)
        if status is not TmiStatus.SUCCESS:
            raise BootFailed(step.value, int(status), f"I/O region registration failed with {status.name}")
        path = blk_image or self.blk_dir / f"cvm{hc.cvm_id}.img"
        hc.devices = {"blk": BlkDevice(BlkBackend(path)), "net": NetDevice()}

    # ── Teardown (step ⑦) ───────────────────────────────────────────────────
    def destroy_cvm(self, cvm_id: int) -> TmiResponse:
        resp = self._tmi(TmiCommand.DESTROY_CVM, cvm_id)
        hc = self.cvms.pop(cvm_id, None)
        if hc is not None and resp.ok:
            for vcpu in hc.vcpus.values():
                if self.gic is not None:
                    self.gic.forget(vcpu.tec_id)
            self._undelegate(hc.delegated)
        self._log(cvm_id, BootStep.DESTROY.value, action=resp.status.name)
        logger.info("cVM %d destroyed (%s)", cvm_id, resp.status.name)
        return resp

    def _undelegate(self, granules: Iterable[int]) -> None:
        for index in granules:
            status = self.monitor.undelegate(index)
            if status is not TmiStatus.SUCCESS:
                logger.warning("Granule %d could not be undelegated (%s)", index, status.name)

    # ── Interrupts ──────────────────────────────────────────────────────────
    def emulate_interrupt(self, cvm_id: int, intid: int, target_index: int = 0) -> None:
        """Raise a physical interrupt for a vCPU; the next entry exits with IRQ and the host injects it."""
        hc = self.cvms[cvm_id]
        vcpu = hc.vcpus.get(target_index)
        if vcpu is None or self.gic is None:
            logger.warning("Interrupt %d for missing vCPU %d of cVM %d", intid, target_index, cvm_id)
            return
        self.gic.assert_interrupt(intid, vcpu.tec_id)
        self._log(cvm_id, "irq_assert", vcpu.tec_id, action=f"intid {intid}")

    def _inject(self, cvm_id: int, vcpu: HostVcpu, intid: int) -> None:
        if not self.policy.injects(intid):
            self._log(cvm_id, "irq_dropped", vcpu.tec_id, action=f"intid {intid}")
            return
        try:
            slot = self.gic.write_lr(vcpu.tec_id, intid)
        except NoFreeListRegister:
            vcpu.retained.append(intid)
            logger.warning("No free list register on TEC %d; interrupt %d retained", vcpu.tec_id, intid)
            return
        self.monitor.ledger.record("lr_writes")
        self._log(cvm_id, "lr_write", vcpu.tec_id, action=f"intid {intid} slot {slot}")

    def _flush_retained(self, cvm_id: int, vcpu: HostVcpu) -> None:
        for _ in range(len(vcpu.retained)):
            self._inject(cvm_id, vcpu, vcpu.retained.popleft())

    def _has_event(self, vcpu: HostVcpu) -> bool:
        if self.gic is None:
            return False
        return (
            self.gic.pending_for(vcpu.tec_id) is not None
            or any(lr is not None for lr in self.gic.list_registers(vcpu.tec_id))
            or bool(vcpu.retained)
        )

    # ── Virtio ──────────────────────────────────────────────────────────────
    @staticmethod
    def touched_spans(dev: VirtioDevice, layout: IoLayout, chains: List[Chain]) -> List[Tuple[int, int]]:
        """Region spans one round trip copies: every queue's rings plus each valid chain's buffers."""
        spans = [layout.queue_span(dev.name, q) for q in dev.queues()]
        for chain in chains:
            spans.extend(chain.data_spans(layout))
        return spans

    def virtio_serve(self, cvm_id: int, device: str) -> int:
        """Sync rings and buffers to the shadow, run the device, sync the same spans back, interrupt vCPU 0."""
        hc = self.cvms[cvm_id]
        dev = hc.devices.get(device)
        if dev is None:
            return 0
        layout: IoLayout = self.monitor.io_layout(cvm_id)
        window = ShadowWindow(self.memory, layout, self.monitor.io_shadow(cvm_id))
        for q in dev.queues():
            offset, length = layout.queue_span(device, q)
            self.monitor.sync_io(cvm_id, Direction.SECURE_TO_SHADOW, offset, length)
        chains = [c for q in dev.queues() for c in dev.available(window, q)]
        for chain in chains:
            for offset, length in chain.data_spans(layout):
                self.monitor.sync_io(cvm_id, Direction.SECURE_TO_SHADOW, offset, length)
        sidecar = self.monitor.io_sidecar(cvm_id)
        scratch = dict(sidecar) if sidecar is not None else None
        done = dev.process(window, chains, scratch)
        if sidecar is not None and scratch is not None:
            restored = {page: tag for page, tag in scratch.items() if sidecar.get(page) != tag}
            if restored:
                self.monitor.store_io_tags(cvm_id, restored)
        for offset, length in self.touched_spans(dev, layout, chains):
            self.monitor.sync_io(cvm_id, Direction.SHADOW_TO_SECURE, offset, length)
        self._log(cvm_id, "virtio", action=f"{device} served {done}")
        if done:
            self.emulate_interrupt(cvm_id, DEVICE_INTID[device], 0)
        return done

    # ── Exit handling ───────────────────────────────────────────────────────
    def _on_mmio(self, hc: HostCVm, vcpu: HostVcpu, info: ExitInfo) -> str:
        base = hc.params.mmio_base
        if info.fault_write and info.fault_ipa == base + GICD_OFFSET + GICD_SGIR:
            intid, targets = decode_sgir(info.write_value)
            for target in targets:
                self.emulate_interrupt(hc.cvm_id, intid, target)
            return f"sgi {intid} -> {targets}"
        device = device_for_notify(base, info.fault_ipa)
        if device is not None and info.fault_write:
            return f"virtio {device}: {self.virtio_serve(hc.cvm_id, device)} request(s)"
        return "mmio ignored"

    def _fault_in(self, hc: HostCVm, ipa: int) -> bool:
        page = ipa - ipa % GRANULE_SIZE
        for _ in range(LAST_LEVEL + 1):
            self._provide(hc, 1)
            resp = self._tmi(TmiCommand.DATA_CREATE_UNKNOWN, hc.cvm_id, page)
            if resp.ok:
                return True
            if resp.status is not TmiStatus.ERROR_INPUT or not resp.results:
                return False
            level = resp.result(0) + 1
            self._provide(hc, 1)
            if not self._tmi(TmiCommand.CREATE_TTT, hc.cvm_id, page, level).ok:
                return False
        return False

    def _on_data_abort(self, hc: HostCVm, vcpu: HostVcpu, info: ExitInfo) -> str:
        p = hc.params
        if p.mmio_base <= info.fault_ipa < 1 << p.ipa_width:
            return self._on_mmio(hc, vcpu, info)
        if p.is_protected(info.fault_ipa) and self.policy.fault_in_protected and self._fault_in(hc, info.fault_ipa):
            return f"faulted in {info.fault_ipa:#x}"
        vcpu.faulted = True
        logger.warning("TEC %d of cVM %d parked after an unhandled abort at %#x",
                       vcpu.tec_id, hc.cvm_id, info.fault_ipa)
        return "parked"

    def _on_psci(self, hc: HostCVm, vcpu: HostVcpu, info: ExitInfo) -> str:
        function = PsciFunction(info.psci_function)
        if function is PsciFunction.CPU_OFF:
            vcpu.on = False
            return "cpu_off"
        target = hc.vcpus.get(info.psci_target)
        outcome = PsciOutcome.SUCCESS if target is not None and not target.on else PsciOutcome.DENIED
        resp = self._tmi(TmiCommand.PSCI_COMPLETE, vcpu.tec_id, target.tec_id if target else vcpu.tec_id,
                         int(outcome))
        if resp.ok and outcome is PsciOutcome.SUCCESS:
            target.on = True
            target.idle = False
            target.faulted = False
            return f"cpu_on {info.psci_target}"
        return f"cpu_on {info.psci_target} denied"

    def _on_irq(self, hc: HostCVm, vcpu: HostVcpu) -> str:
        """Acknowledge everything pending for the vCPU; what does not fit the LRs is retained."""
        taken: List[int] = []
        while self.gic is not None:
            intid = self.gic.acknowledge(vcpu.tec_id)
            if intid is None:
                break
            self._inject(hc.cvm_id, vcpu, intid)
            taken.append(intid)
        return f"irq {taken}" if taken else "spurious"

    def _on_host_call(self, hc: HostCVm, vcpu: HostVcpu, info: ExitInfo) -> str:
        results = hc.responder.get(info.host_call_args[0], ())
        vcpu.results = (list(results) + [0, 0, 0, 0])[:4]
        return f"host_call {info.host_call_args[0]:#x}"

    # ── Run loop (steps ⑤ and ⑥) ───────────────────────────────────────────
    def enter(self, hc: HostCVm, vcpu: HostVcpu, budget: int, cpu: int = 0) -> Optional[ExitInfo]:
        """One tec_enter plus the host's handling of its exit; returns None if the entry was refused."""
        if self.gic is not None:
            self._flush_retained(hc.cvm_id, vcpu)
            lr_word = self.gic.lr_word(vcpu.tec_id)
        else:
            lr_word = 0
        resp = self._tmi(TmiCommand.TEC_ENTER, vcpu.tec_id, budget, *vcpu.results, lr_word, cpu=cpu)
        if not resp.ok:
            logger.debug("tec_enter(%d) refused: %s", vcpu.tec_id, resp.status.name)
            vcpu.on = False
            return None
        info = resp.exit
        vcpu.results = [0, 0, 0, 0]
        vcpu.idle = info.reason is ExitReason.QUANTUM and info.idle
        if self.gic is not None:
            self.gic.sync_from_word(vcpu.tec_id, resp.result(2))
        if info.reason is ExitReason.HOST_CALL:
            action = self._on_host_call(hc, vcpu, info)
        elif info.reason is ExitReason.PSCI:
            action = self._on_psci(hc, vcpu, info)
        elif info.reason is ExitReason.DATA_ABORT:
            action = self._on_data_abort(hc, vcpu, info)
        elif info.reason is ExitReason.IRQ:
            action = self._on_irq(hc, vcpu)
        elif info.reason is ExitReason.SYSTEM_OFF:
            action = "system_off"
        else:
            action = "idle" if info.idle else "quantum"
        self._log(hc.cvm_id, "exit", vcpu.tec_id, info, action)
        return info

    def schedulable(self, hc: HostCVm) -> List[HostVcpu]:
        return [
            v for _, v in sorted(hc.vcpus.items())
            if v.on and not v.faulted and (not v.idle or self._has_event(v))
        ]

    def run(self, cvm_id: int, max_steps: Optional[int] = None,
            interrupts: Sequence[ScheduledInterrupt] = ()) -> RunReport:
        """
        Round-robin every runnable vCPU until system off, deadlock or `max_steps`.

        `interrupts` are (at_step, intid, vcpu index) triples asserted once the
        run has made `at_step` entries; when every vCPU is idle the next one is
        raised early instead of reporting a deadlock.
        """
        hc = self.cvms.get(cvm_id)
        if hc is None or self.monitor.state_of(cvm_id) is not CVmState.ACTIVE:
            raise HostError(f"cVM {cvm_id} is not booted and ACTIVE")
        max_steps = max_steps or settings.max_steps
        schedule: Deque[ScheduledInterrupt] = deque(sorted(interrupts))
        report = RunReport(cvm_id)
        exits: Counter = Counter()
        before = self.monitor.ledger.snapshot()
        self._log(cvm_id, BootStep.RUN.value)
        turn = 0
        while report.steps < max_steps:
            while schedule and schedule[0][0] <= report.steps:
                _, intid, target = schedule.popleft()
                self.emulate_interrupt(cvm_id, intid, target)
            ready = self.schedulable(hc)
            if not ready and schedule:
                _, intid, target = schedule.popleft()
                self.emulate_interrupt(cvm_id, intid, target)
                continue
            if not ready:
                report.deadlock = True
                logger.warning("cVM %d: no runnable TEC and no pending event after %d entries",
                               cvm_id, report.steps)
                break
            vcpu = ready[turn % len(ready)]
            turn += 1
            info = self.enter(hc, vcpu, self.policy.quantum)
            report.steps += 1
            if info is None:
                continue
            exits[info.reason.name] += 1
            if info.reason is ExitReason.SYSTEM_OFF:
                report.guest_traces = self.guest_traces(cvm_id)
                self._log(cvm_id, BootStep.EXIT.value, vcpu.tec_id)
                report.destroyed = self.destroy_cvm(cvm_id).ok
                break
        if not report.destroyed:
            report.guest_traces = self.guest_traces(cvm_id)
        report.exits = dict(exits)
        report.final_state = self.monitor.state_of(cvm_id).value
        report.faulted = [v.index for v in hc.vcpus.values() if v.faulted]
        report.counters = self.monitor.ledger.delta(before)
        logger.info("cVM %d ran %d entries: %s, final state %s", cvm_id, report.steps, report.exits,
                    report.final_state)
        return report

    def run_concurrent(self, cvm_id: int, entries_per_vcpu: int = 64) -> RunReport:
        """Drive every vCPU from its own simulated CPU thread; exits are handled as in `run`."""
        hc = self.cvms.get(cvm_id)
        if hc is None or self.monitor.state_of(cvm_id) is not CVmState.ACTIVE:
            raise HostError(f"cVM {cvm_id} is not booted and ACTIVE")
        before = self.monitor.ledger.snapshot()
        self._log(cvm_id, BootStep.RUN.value)
        exits: Counter = Counter()
        lock = threading.Lock()
        off = threading.Event()

        def drive(vcpu: HostVcpu) -> Callable[[SimulatedCpu], None]:
            def work(runner: SimulatedCpu) -> None:
                for _ in range(entries_per_vcpu):
                    if off.is_set() or runner.stop_event.is_set():
                        return
                    if not vcpu.on or vcpu.faulted or (vcpu.idle and not self._has_event(vcpu)):
                        runner.stop_event.wait(0.001)
                        continue
                    info = self.enter(hc, vcpu, self.policy.quantum, cpu=runner.cpu)
                    if info is None:
                        continue
                    with lock:
                        exits[info.reason.name] += 1
                    if info.reason is ExitReason.SYSTEM_OFF:
                        off.set()
            return work

        CpuPool(self.monitor).run(work=[drive(v) for _, v in sorted(hc.vcpus.items())])
        report = RunReport(cvm_id, steps=sum(exits.values()), exits=dict(exits))
        report.guest_traces = self.guest_traces(cvm_id)
        if off.is_set():
            self._log(cvm_id, BootStep.EXIT.value)
            report.destroyed = self.destroy_cvm(cvm_id).ok
        report.final_state = self.monitor.state_of(cvm_id).value
        report.faulted = [v.index for v in hc.vcpus.values() if v.faulted]
        report.counters = self.monitor.ledger.delta(before)
        return report

    def guest_traces(self, cvm_id: int) -> Dict[int, List[dict]]:
        """Guest-visible markers per vCPU index (a debugging aid outside the threat model)."""
        hc = self.cvms.get(cvm_id)
        if hc is None:
            return {}
        return {index: self.monitor.guest_trace(v.tec_id) for index, v in sorted(hc.vcpus.items())}

    # ── Shadow inspection ───────────────────────────────────────────────────
    def read_shadow(self, cvm_id: int, ipa: int, length: int) -> bytes:
        layout = self.monitor.io_layout(cvm_id)
        return ShadowWindow(self.memory, layout, self.monitor.io_shadow(cvm_id)).read(ipa, length)

    def stage_bytes(self, data: bytes) -> Tuple[int, int]:
        return self.ns.stage(data)

    def write_ns(self, index: int, data: bytes, offset: int = 0) -> None:
        self.memory.write(_HOST, index, data, offset)
