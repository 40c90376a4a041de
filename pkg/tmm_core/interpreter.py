# tzcvm_sim/tmm_core/interpreter.py
"""
Runs a TEC's scripted program inside tec_enter.

The interpreter stops at the first event the host has to see: a pending
physical interrupt, a host call, a PSCI request, a stage-2 or MMIO fault,
system off, or the end of the run budget. Only the sanctioned ExitInfo
fields leave this module; everything else stays in the Tec.
"""
from __future__ import annotations

import logging
from typing import TYPE_CHECKING, List, Optional

from host_sim import guest as g
from host_sim.virtio import DEVICE_INTID, IoLayout, driver_reap, driver_submit, notify_address
from mem_model.config import GRANULE_SIZE
from mem_model.errors import AccessFault
from mem_model.granules import Requestor

from .config import GICD_OFFSET, GICD_SGIR
from .cvm import CVmDescriptor
from .tec import PendingKind, PendingPsci, Tec
from .types import U64, ExitInfo, ExitReason, LrState, PsciFunction

if TYPE_CHECKING:
    from .monitor import Monitor

logger = logging.getLogger(__name__)

_PSCI = {"cpu_on": PsciFunction.CPU_ON, "cpu_off": PsciFunction.CPU_OFF, "system_off": PsciFunction.SYSTEM_OFF}
_DEVICE_BY_INTID = {intid: device for device, intid in DEVICE_INTID.items()}


class GuestAbort(Exception):
    def __init__(self, ipa: int, write: bool):
        super().__init__(f"stage-2 fault at {ipa:#x} ({'write' if write else 'read'})")
        self.ipa = ipa
        self.write = write


class GuestMemory:
    """The cVM's view of memory: stage-2 walk, then the TZASC/owner gate."""

    def __init__(self, monitor: "Monitor", cvm: CVmDescriptor):
        self.memory = monitor.memory
        self.cvm = cvm
        self._who = Requestor.cvm(cvm.cvm_id)

    def _pages(self, ipa: int, length: int, write: bool):
        limit = 1 << self.cvm.params.ipa_width
        while length > 0:
            if not 0 <= ipa < limit:
                raise GuestAbort(ipa, write)
            t = self.cvm.ttt.resolve(ipa)
            if t is None or not (t.attrs.writable if write else t.attrs.readable):
                raise GuestAbort(ipa, write)
            within = ipa % GRANULE_SIZE
            chunk = min(length, GRANULE_SIZE - within)
            yield ipa, t.granule, within, chunk
            ipa += chunk
            length -= chunk

    def read(self, ipa: int, length: int) -> bytes:
        out = bytearray()
        for at, granule, within, chunk in self._pages(ipa, length, False):
            try:
                out += self.memory.read(self._who, granule, within, chunk)
            except AccessFault as exc:
                raise GuestAbort(at, False) from exc
        return bytes(out)

    def write(self, ipa: int, data: bytes) -> None:
        spans = list(self._pages(ipa, len(data), True))
        pos = 0
        for at, granule, within, chunk in spans:
            try:
                self.memory.write(self._who, granule, data[pos:pos + chunk], within)
            except AccessFault as exc:
                raise GuestAbort(at, True) from exc
            pos += chunk


class Interpreter:
    def __init__(self, monitor: "Monitor"):
        self.monitor = monitor

    # ── Entry ───────────────────────────────────────────────────────────────
    def enter(self, cvm: CVmDescriptor, tec: Tec, budget: int, host_results: List[int]) -> ExitInfo:
        mem = GuestMemory(self.monitor, cvm)
        self._complete_pending(tec, host_results)
        self._deliver_virqs(cvm, tec, mem)
        return self._run(cvm, tec, budget, mem)

    def _complete_pending(self, tec: Tec, results: List[int]) -> None:
        if tec.pending is PendingKind.HOST_CALL:
            tec.gprs[0:4] = [r & U64 for r in results]
            tec.trace.append({"host_call_ret": list(tec.gprs[0:4])})
        elif tec.pending is PendingKind.MMIO_READ:
            tec.gprs[0] = results[0] & U64
            tec.trace.append({"mmio_read": tec.pending_ipa, "value": tec.gprs[0]})
        tec.pending = None
        tec.pending_ipa = 0

    def _deliver_virqs(self, cvm: CVmDescriptor, tec: Tec, mem: GuestMemory) -> None:
        for slot, lr in enumerate(tec.list_registers):
            if lr is None or lr.state is not LrState.PENDING:
                continue
            tec.trace.append({"virq": lr.intid})
            tec.wake = True
            device = _DEVICE_BY_INTID.get(lr.intid)
            if device is not None and cvm.io is not None:
                layout = IoLayout.for_pages(cvm.io.ipa_base, cvm.io.pages, cvm.io.queue_size)
                try:
                    used = driver_reap(mem, layout, device, cvm.driver_state)
                except GuestAbort:
                    used = []
                if used:
                    tec.trace.append({"virtio_used": used})
            tec.list_registers[slot] = None     # handled and EOI'd by the guest

    # ── Main loop ───────────────────────────────────────────────────────────
    def _run(self, cvm: CVmDescriptor, tec: Tec, budget: int, mem: GuestMemory) -> ExitInfo:
        gic = self.monitor.gic
        ledger = self.monitor.ledger
        program = tec.program
        ticks = budget
        while True:
            if gic is not None and gic.pending_for(tec.tec_id) is not None:
                # Taken to the monitor as FIQ, reported to the host as IRQ.
                ledger.record_many(fiq_taken=1, interrupt_emulation=1)
                return ExitInfo(ExitReason.IRQ)
            if tec.pc >= len(program):
                return ExitInfo(ExitReason.QUANTUM, idle=True)
            if ticks <= 0:
                return ExitInfo(ExitReason.QUANTUM)
            instr = program[tec.pc]

            if isinstance(instr, g.ComputeTicks):
                if tec.ticks_left_in_instr == 0:
                    tec.ticks_left_in_instr = instr.ticks
                spent = min(ticks, tec.ticks_left_in_instr)
                tec.ticks_left_in_instr -= spent
                ticks -= spent
                if tec.ticks_left_in_instr == 0:
                    tec.pc += 1
                continue

            ticks -= 1
            exit_info = self._step(cvm, tec, instr, mem)
            if exit_info is not None:
                return exit_info

    def _step(self, cvm: CVmDescriptor, tec: Tec, instr: g.Instruction, mem: GuestMemory) -> Optional[ExitInfo]:
        try:
            if isinstance(instr, g.MemWrite):
                mem.write(instr.ipa, bytes.fromhex(instr.data))
                tec.pc += 1
            elif isinstance(instr, g.MemRead):
                data = mem.read(instr.ipa, instr.length)
                tec.trace.append({"read": instr.ipa, "data": data.hex()})
                tec.pc += 1
            elif isinstance(instr, (g.MmioRead, g.MmioWrite)):
                return self._mmio(cvm, tec, instr, mem)
            elif isinstance(instr, g.HostCall):
                return self._host_call(tec, tuple(instr.args))
            elif isinstance(instr, g.TsiCall):
                result = self.monitor.tsi.handle(cvm, tec, instr, mem)
                if result.host_call is not None:
                    return self._host_call(tec, result.host_call)
                tec.pc += 1
            elif isinstance(instr, g.VirtioSubmit):
                return self._virtio_submit(cvm, tec, instr, mem)
            elif isinstance(instr, g.Wfi):
                if not tec.wake:
                    return ExitInfo(ExitReason.QUANTUM, idle=True)
                tec.wake = False
                tec.pc += 1
            elif isinstance(instr, g.PsciCall):
                return self._psci(cvm, tec, instr)
            elif isinstance(instr, g.Halt):
                tec.pc += 1
                return self._system_off(cvm, tec)
        except GuestAbort as abort:
            # pc stays on the faulting instruction so it retries after the host fixes the mapping
            return ExitInfo.data_abort(abort.ipa, abort.write)
        return None

    # ── Exits ───────────────────────────────────────────────────────────────
    def _host_call(self, tec: Tec, args) -> ExitInfo:
        tec.pending = PendingKind.HOST_CALL
        tec.pc += 1
        self.monitor.ledger.record("host_calls")
        return ExitInfo.host_call(tuple(a & U64 for a in args))

    def _mmio(self, cvm: CVmDescriptor, tec: Tec, instr, mem: GuestMemory) -> Optional[ExitInfo]:
        write = isinstance(instr, g.MmioWrite)
        base = cvm.params.mmio_base
        if not base <= instr.ipa < 1 << cvm.params.ipa_width:
            # Outside the emulated window this is an ordinary 8-byte access.
            if write:
                mem.write(instr.ipa, instr.value.to_bytes(8, "little"))
            else:
                value = int.from_bytes(mem.read(instr.ipa, 8), "little")
                tec.gprs[0] = value
                tec.trace.append({"read": instr.ipa, "value": value})
            tec.pc += 1
            return None
        if instr.ipa == base + GICD_OFFSET + GICD_SGIR and write:
            self.monitor.ledger.record("interrupt_emulation")
        tec.pending = PendingKind.MMIO_WRITE if write else PendingKind.MMIO_READ
        tec.pending_ipa = instr.ipa
        tec.pc += 1
        return ExitInfo.data_abort(instr.ipa, write, instr.value if write else 0)

    def _virtio_submit(self, cvm: CVmDescriptor, tec: Tec, instr: g.VirtioSubmit, mem: GuestMemory) -> Optional[ExitInfo]:
        if cvm.io is None:
            tec.trace.append({"virtio_error": f"{instr.device}: no I/O region"})
            tec.pc += 1
            return None
        layout = IoLayout.for_pages(cvm.io.ipa_base, cvm.io.pages, cvm.io.queue_size)
        head = driver_submit(
            mem, layout, instr.device, instr.queue,
            [(d.ipa, d.length, d.device_writes) for d in instr.descriptors],
            cvm.driver_state,
        )
        tec.trace.append({"virtio_submit": instr.device, "queue": instr.queue, "head": head})
        notify = notify_address(cvm.params.mmio_base, instr.device)
        tec.pending = PendingKind.MMIO_WRITE
        tec.pending_ipa = notify
        tec.pc += 1
        return ExitInfo.data_abort(notify, True, instr.queue)

    def _psci(self, cvm: CVmDescriptor, tec: Tec, instr: g.PsciCall) -> ExitInfo:
        function = _PSCI[instr.function]
        tec.pc += 1
        if function is PsciFunction.SYSTEM_OFF:
            return self._system_off(cvm, tec)
        if function is PsciFunction.CPU_OFF:
            tec.runnable = False
            tec.token_retrieval = None
            return ExitInfo(ExitReason.PSCI, psci_function=int(function))
        tec.pending_psci = PendingPsci(function, instr.target, instr.entry)
        return ExitInfo(ExitReason.PSCI, psci_function=int(function), psci_target=instr.target,
                        psci_entry=instr.entry)

    def _system_off(self, cvm: CVmDescriptor, tec: Tec) -> ExitInfo:
        self.monitor.system_off(cvm)
        return ExitInfo(ExitReason.SYSTEM_OFF)
