# tzcvm_sim/tmm_core/monitor.py
"""
The TrustZone management monitor.

All host requests enter through `dispatch`, which serializes them behind
one re-entrant gate, turns every TmiError into a response and leaves state
untouched on failure. Handlers check their inputs before they mutate
anything, so a failed command is a no-op.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
import struct
import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from attestation.keys import Platform
from host_sim.gic import GicState
from host_sim.virtio import IoLayout
from mem_model import errors as mem_errors
from mem_model.config import GRANULE_SIZE
from mem_model.granules import GranuleState, MappingPolicy, Requestor, World
from mem_model.memory import PhysicalMemory
from shadow_sync.errors import ShadowSyncError
from shadow_sync.sync import Direction, ShadowSync, TransferStats
from tsi_services.services import TsiServices

from .config import BLOCK_LEVELS, ENTRIES_PER_TABLE, FEATURE_REGISTER_VALID, settings
from .cvm import CVmDescriptor, IoRegion
from .errors import InputError, OutOfMemory, PolicyError, StateError, TmiError
from .interpreter import Interpreter
from .measurement import EventKind, MeasurementState
from .tec import Tec
from .trace import TraceWriter
from .ttt import LAST_LEVEL, Attrs, BlockEntry, PageEntry, Ttt
from .types import (
    U64,
    CVmParams,
    CVmState,
    ExitInfo,
    ExitReason,
    HashAlgo,
    PsciFunction,
    PsciOutcome,
    TecParams,
    TmiCommand,
    TmiRequest,
    TmiResponse,
    TmiStatus,
    pack_list_registers,
    unpack_list_registers,
)

logger = logging.getLogger(__name__)

_TMM = Requestor.tmm()
_BLOCK_2M = BLOCK_LEVELS[2]
_PAGES_PER_2M = _BLOCK_2M // GRANULE_SIZE
_MAX_TEC_PARAM_PAGES = 16


@contextmanager
def _memory_errors() -> Iterator[None]:
    """Translate memory-model failures into TMI status codes."""
    try:
        yield
    except (mem_errors.OutOfSecureMemory, mem_errors.OutOfShadowMemory) as exc:
        raise OutOfMemory(str(exc)) from exc
    except mem_errors.PolicyMismatch as exc:
        raise PolicyError(str(exc)) from exc
    except mem_errors.WrongState as exc:
        raise StateError(str(exc)) from exc
    except (mem_errors.UnknownCVm, IndexError) as exc:
        raise InputError(str(exc)) from exc


class Monitor:
    def __init__(
        self,
        memory: PhysicalMemory,
        platform: Optional[Platform] = None,
        gic: Optional[GicState] = None,
        trace: Optional[TraceWriter] = None,
        features: Optional[int] = None,
    ):
        self.memory = memory
        self.ledger = memory.ledger
        self.platform = platform or Platform()
        self.gic = gic
        self.features = settings.platform_features if features is None else features
        self.cvms: Dict[int, CVmDescriptor] = {}
        self.tecs: Dict[int, Tec] = {}
        self.sync = ShadowSync(memory, self.ledger)
        self.tsi = TsiServices(self)
        self.interpreter = Interpreter(self)
        self.coverage: Counter = Counter()
        self.trace: Optional[TraceWriter] = None
        self._gate = threading.RLock()
        self._next_cvm = 1
        self._tec_ids = itertools.count(1)
        self._handlers: Dict[TmiCommand, Tuple[Callable[..., object], int, int]] = {
            TmiCommand.CREATE_CVM: (self._create_cvm, 2, 2),
            TmiCommand.DESTROY_CVM: (self._destroy_cvm, 1, 1),
            TmiCommand.ACTIVATE_CVM: (self._activate_cvm, 1, 1),
            TmiCommand.TEC_CREATE: (self._tec_create, 2, 3),
            TmiCommand.TEC_DESTROY: (self._tec_destroy, 1, 1),
            TmiCommand.TEC_ENTER: (self._tec_enter, 1, 7),
            TmiCommand.CREATE_TTT: (self._create_ttt, 3, 3),
            TmiCommand.DESTROY_TTT: (self._destroy_ttt, 3, 3),
            TmiCommand.DATA_CREATE: (self._data_create, 3, 3),
            TmiCommand.DATA_CREATE_UNKNOWN: (self._data_create_unknown, 2, 2),
            TmiCommand.DATA_DESTROY: (self._data_destroy, 2, 2),
            TmiCommand.DATA_BLOCK_CREATE: (self._data_block_create, 4, 4),
            TmiCommand.DATA_BLOCK_CREATE_UNKNOWN: (self._data_block_create_unknown, 3, 3),
            TmiCommand.DATA_BLOCK_DESTROY: (self._data_block_destroy, 3, 3),
            TmiCommand.MAP_PROTECTED: (self._map_protected, 2, 2),
            TmiCommand.UNMAP_PROTECTED: (self._unmap_protected, 2, 2),
            TmiCommand.MAP_UNPROTECTED: (self._map_unprotected, 3, 3),
            TmiCommand.UNMAP_UNPROTECTED: (self._unmap_unprotected, 2, 2),
            TmiCommand.PSCI_COMPLETE: (self._psci_complete, 3, 3),
        }
        if trace is not None:
            self.attach_trace(trace)

    # ── Tracing ─────────────────────────────────────────────────────────────
    def describe(self) -> Dict[str, object]:
        return {
            "granules": len(self.memory),
            "policy": self.memory.policy.value,
            "tzasc": [{"base": r.base, "count": r.count, "secure": r.secure} for r in self.memory.tzasc.regions],
            "features": self.features,
            "list_registers": settings.list_registers,
            "platform": self.platform.describe(),
        }

    def attach_trace(self, trace: TraceWriter) -> None:
        self.trace = trace
        trace.config(**self.describe())
        self.memory.host_write_observer = self._on_host_write
        if self.gic is not None:
            self.gic.observer = self._on_interrupt

    def _on_host_write(self, granule: int, offset: int, data: bytes) -> None:
        if self.trace is not None:
            self.trace.event("host_write", granule=granule, offset=offset, data=data)

    def _on_interrupt(self, kind: str, intid: int, target: int) -> None:
        if self.trace is not None:
            self.trace.event(kind, intid=intid, target=target)

    def _event(self, kind: str, **fields: object) -> None:
        if self.trace is not None:
            self.trace.event(kind, **fields)

    # ── Dispatcher ──────────────────────────────────────────────────────────
    def dispatch(self, request: TmiRequest, cpu: int = 0) -> TmiResponse:
        with self._gate:
            self.ledger.record_many(tmi_calls=1, smc_calls=1, world_switch=1)
            try:
                command: Optional[TmiCommand] = TmiCommand(request.command)
                name = command.name
            except ValueError:
                command, name = None, f"{request.command:#x}"
            response = self._handle(command, request.args)
            if self.trace is not None:
                self.trace.tmi(cpu, name, request.args, response.status.name, response.results,
                               response.exit.to_dict() if response.exit is not None else None)
            logger.debug("TMI %s%s -> %s %s", name, tuple(request.args), response.status.name, response.results)
            return response

    def tmi(self, command: TmiCommand, *args: int, cpu: int = 0) -> TmiResponse:
        return self.dispatch(TmiRequest(int(command), tuple(args)), cpu)

    def _handle(self, command: Optional[TmiCommand], args: Tuple[int, ...]) -> TmiResponse:
        if command is None:
            return TmiResponse(TmiStatus.ERROR_INPUT)
        self.coverage[command] += 1
        handler, least, most = self._handlers[command]
        if not least <= len(args) <= most or any(not isinstance(a, int) or not 0 <= a <= U64 for a in args):
            return TmiResponse(TmiStatus.ERROR_INPUT)
        try:
            with _memory_errors():
                outcome = handler(*args)
        except TmiError as exc:
            logger.debug("%s rejected: %s", command.name, exc)
            return TmiResponse(exc.status, tuple(exc.results))
        if isinstance(outcome, TmiResponse):
            return outcome
        return TmiResponse(TmiStatus.SUCCESS, tuple(outcome or ()))

    # ── Lookups ─────────────────────────────────────────────────────────────
    def _cvm(self, cvm_id: int) -> CVmDescriptor:
        cvm = self.cvms.get(cvm_id)
        if cvm is None:
            raise InputError(f"unknown cVM {cvm_id}")
        return cvm

    def _live_cvm(self, cvm_id: int) -> CVmDescriptor:
        cvm = self._cvm(cvm_id)
        if cvm.state not in (CVmState.NEW, CVmState.ACTIVE):
            raise StateError(f"cVM {cvm_id} is {cvm.state.value}")
        return cvm

    def _tec(self, tec_id: int) -> Tec:
        tec = self.tecs.get(tec_id)
        if tec is None:
            raise InputError(f"unknown TEC {tec_id}")
        return tec

    def state_of(self, cvm_id: int) -> CVmState:
        cvm = self.cvms.get(cvm_id)
        return cvm.state if cvm is not None else CVmState.NULL

    def guest_trace(self, tec_id: int) -> List[dict]:
        return list(self._tec(tec_id).trace)

    def _read_ns(self, granule: int, pages: int = 1) -> bytes:
        """Contents of host-written NS granules handed to the monitor by index."""
        if pages < 1 or not 0 <= granule or granule + pages > len(self.memory):
            raise InputError(f"NS granules [{granule}, +{pages}) out of range")
        out = bytearray()
        for index in range(granule, granule + pages):
            g = self.memory.granule(index)
            if g.world is not World.NORMAL or g.state is not GranuleState.NS_FREE:
                raise InputError(f"granule {index} is not a free normal-world granule")
            out += self.memory.read(_TMM, index)
        return bytes(out)

    @staticmethod
    def _check_protected(cvm: CVmDescriptor, ipa: int) -> None:
        if ipa % GRANULE_SIZE or not cvm.params.is_protected(ipa):
            raise InputError(f"IPA {ipa:#x} is unaligned or not protected")

    # ── cVM lifecycle ───────────────────────────────────────────────────────
    def _create_cvm(self, params_granule: int, granule_count: int) -> Tuple[int]:
        """Read params from an NS granule, claim descriptor and root table, open the measurement.

        Under the direct policy `granule_count` sizes the fixed secure region; under
        the dynamic policy the cVM draws from delegated granules instead.
        """
        if len(self.cvms) >= settings.max_cvms:
            raise OutOfMemory("cVM table is full")
        raw = self._read_ns(params_granule)
        try:
            params = CVmParams.from_page(raw)
        except (ValueError, struct.error) as exc:
            raise InputError(f"bad cVM params: {exc}") from exc
        if params.vcpu_count < 1:
            raise InputError("vcpu_count must be at least 1")
        if params.feature_mask & ~self.features:
            raise InputError(f"feature mask {params.feature_mask:#x} exposes features the platform lacks")
        if params.hash_algo not in {int(h) for h in HashAlgo}:
            raise InputError(f"unknown hash algorithm {params.hash_algo}")
        if params.protected_ipa_limit > params.mmio_base:
            raise InputError("protected IPA range overlaps the MMIO window")

        cvm_id = self._next_cvm
        direct = self.memory.policy is MappingPolicy.DIRECT
        if direct and granule_count < 2:
            raise InputError("a cVM needs at least two granules")
        with _memory_errors():
            if direct:
                self.memory.reserve_secure_region(cvm_id, granule_count)
            elif self.memory.free_secure_count(cvm_id) < 2:
                raise OutOfMemory("fewer than two delegated granules available")
            descriptor = self.memory.claim(cvm_id, GranuleState.PARAMS)
            root = self.memory.claim(cvm_id, GranuleState.TTT)

        self._next_cvm += 1
        cvm = CVmDescriptor(
            cvm_id=cvm_id,
            params=params,
            descriptor_granule=descriptor,
            ttt=Ttt(root, params.ipa_width),
            measurement=MeasurementState.open(params.digest()),
            region=self.memory.region_of(cvm_id),
        )
        self.cvms[cvm_id] = cvm
        logger.info("cVM %d created (%s policy, IPA width %d)", cvm_id, self.memory.policy.value, params.ipa_width)
        return (cvm_id,)

    def _activate_cvm(self, cvm_id: int) -> None:
        """NEW -> ACTIVE; seals the initial measurement. Needs at least one TEC."""
        cvm = self._cvm(cvm_id)
        if cvm.state is not CVmState.NEW:
            raise StateError(f"cVM {cvm_id} is {cvm.state.value}, expected NEW")
        if not cvm.tecs:
            raise StateError(f"cVM {cvm_id} has no TEC")
        cvm.measurement.seal()
        cvm.move(CVmState.ACTIVE)
        logger.info("cVM %d activated, measurement %s", cvm_id, cvm.initial_measurement.hex())

    def system_off(self, cvm: CVmDescriptor) -> None:
        """Stop every TEC of `cvm`; called by the guest and by destroy."""
        if cvm.state is CVmState.SYSTEM_OFF:
            return
        cvm.move(CVmState.SYSTEM_OFF)
        for tec_id in cvm.tecs:
            self.tecs[tec_id].runnable = False
        self._event("state", cvm=cvm.cvm_id, state=CVmState.SYSTEM_OFF.value)
        logger.info("cVM %d is SYSTEM_OFF", cvm.cvm_id)

    def _destroy_cvm(self, cvm_id: int) -> None:
        """Stop, scrub and free every granule the cVM owns, then drop it (-> NULL).

        Valid from any live state; TECs, data pages, detached pages, tables,
        descriptor and I/O shadow are released deepest first.
        """
        cvm = self._cvm(cvm_id)
        self.system_off(cvm)
        with _memory_errors():
            for tec_id in cvm.tecs:
                tec = self.tecs.pop(tec_id)
                tec.scrub()
                self.memory.free(tec.granule)
            for _, granule, attrs in list(cvm.ttt.mapped_pages()):
                if attrs.protected:
                    self.memory.free(granule)
            for granule in cvm.detached.values():
                self.memory.free(granule)
            for table in cvm.ttt.non_root_tables_deepest_first():
                self.memory.free(table.granule)
            self.memory.free(cvm.ttt.root.granule)
            self.memory.free(cvm.descriptor_granule)
            if cvm.io is not None:
                self._release_shadow(cvm)
            self.sync.unregister(cvm_id)
            if self.memory.policy is MappingPolicy.DIRECT:
                self.memory.release_secure_region(cvm_id)
        cvm.tecs.clear()
        cvm.detached.clear()
        cvm.shared.clear()
        cvm.move(CVmState.NULL)
        del self.cvms[cvm_id]
        self._event("state", cvm=cvm_id, state=CVmState.NULL.value)
        logger.info("cVM %d destroyed and scrubbed", cvm_id)

    # ── TECs ────────────────────────────────────────────────────────────────
    def _tec_create(self, cvm_id: int, params_granule: int, pages: int = 1) -> Tuple[int]:
        """Add a vCPU while NEW; its params are measured as a TEC event."""
        cvm = self._cvm(cvm_id)
        if cvm.state is not CVmState.NEW:
            raise StateError(f"cVM {cvm_id} is {cvm.state.value}; TECs can only be added while NEW")
        if len(cvm.tecs) >= min(cvm.params.vcpu_count, settings.max_tecs_per_cvm):
            raise InputError(f"cVM {cvm_id} already has {len(cvm.tecs)} TECs")
        if not 1 <= pages <= _MAX_TEC_PARAM_PAGES:
            raise InputError(f"TEC params span {pages} pages")
        raw = self._read_ns(params_granule, pages)
        try:
            params = TecParams.from_pages(raw)
        except (ValueError, struct.error) as exc:
            raise InputError(f"bad TEC params: {exc}") from exc
        with _memory_errors():
            granule = self.memory.claim(cvm_id, GranuleState.TEC)
        index = 1 + max((self.tecs[t].index for t in cvm.tecs), default=-1)
        cvm.measurement.extend(EventKind.TEC, index, params.digest())
        tec = Tec(
            tec_id=next(self._tec_ids),
            cvm_id=cvm_id,
            index=index,
            granule=granule,
            program=params.program,
            pc=params.entry_pc,
            runnable=index == 0,
            list_registers=[None] * settings.list_registers,
        )
        tec.reset_registers(params.gprs)
        self.tecs[tec.tec_id] = tec
        cvm.tecs.append(tec.tec_id)
        return (tec.tec_id,)

    def _tec_destroy(self, tec_id: int) -> None:
        """Remove a TEC of a cVM that is not running."""
        tec = self._tec(tec_id)
        cvm = self.cvms[tec.cvm_id]
        if cvm.state is CVmState.ACTIVE:
            raise StateError(f"TEC {tec_id} belongs to a running cVM")
        with _memory_errors():
            self.memory.free(tec.granule)
        tec.scrub()
        cvm.tecs.remove(tec_id)
        del self.tecs[tec_id]

    def _tec_enter(self, tec_id: int, budget: int = 0, r0: int = 0, r1: int = 0, r2: int = 0,
                   r3: int = 0, lr_word: int = 0) -> TmiResponse:
        """Run one TEC for up to `budget` steps; results carry the exit reason and list registers."""
        tec = self._tec(tec_id)
        cvm = self.cvms[tec.cvm_id]
        if cvm.state is not CVmState.ACTIVE:
            raise StateError(f"cVM {cvm.cvm_id} is {cvm.state.value}")
        if not tec.runnable:
            raise StateError(f"TEC {tec_id} is not runnable")
        if tec.pending_psci is not None:
            raise StateError(f"TEC {tec_id} has an uncompleted PSCI request")
        try:
            tec.list_registers = unpack_list_registers(lr_word, settings.list_registers)
        except ValueError as exc:
            raise InputError(f"malformed list-register word {lr_word:#x}") from exc
        exit_info = self.interpreter.enter(cvm, tec, budget or settings.default_run_budget, [r0, r1, r2, r3])
        lr_out = pack_list_registers(tec.list_registers)
        return TmiResponse(
            TmiStatus.SUCCESS,
            (int(exit_info.reason), exit_info.fault_ipa, lr_out, _exit_aux(exit_info)),
            exit_info,
        )

    def _psci_complete(self, calling_id: int, target_id: int, outcome: int) -> None:
        """Host answer to a pending PSCI request of `calling_id`."""
        caller = self._tec(calling_id)
        pending = caller.pending_psci
        if pending is None:
            raise InputError(f"TEC {calling_id} has no pending PSCI request")
        try:
            result = PsciOutcome(outcome)
        except ValueError as exc:
            raise InputError(f"bad PSCI outcome {outcome}") from exc
        if result is PsciOutcome.SUCCESS:
            target = self._tec(target_id)
            if target.cvm_id != caller.cvm_id or target.index != pending.target:
                raise InputError(f"TEC {target_id} is not vCPU {pending.target} of cVM {caller.cvm_id}")
            if target.runnable:
                raise InputError(f"vCPU {pending.target} is already on")
            target.runnable = True
            target.pc = pending.entry
            target.pending = None
            target.reset_registers(())
        caller.pending_psci = None
        caller.gprs[0] = int(result)
        caller.trace.append({"psci": PsciFunction(pending.function).name.lower(), "target": pending.target,
                             "outcome": result.name})

    # ── Translation tables ──────────────────────────────────────────────────
    def _create_ttt(self, cvm_id: int, ipa: int, level: int) -> None:
        """Install a table at `level` covering `ipa`."""
        cvm = self._live_cvm(cvm_id)
        if not 1 <= level <= LAST_LEVEL:
            raise InputError(f"no table level {level}")
        with _memory_errors():
            granule = self.memory.claim(cvm_id, GranuleState.TTT)
        try:
            cvm.ttt.create_table(ipa, level, granule)
        except TmiError:
            self.memory.free(granule)
            raise

    def _destroy_ttt(self, cvm_id: int, ipa: int, level: int) -> None:
        """Remove an empty table at `level`; its granule is scrubbed."""
        cvm = self._live_cvm(cvm_id)
        granule = cvm.ttt.destroy_table(ipa, level)
        self.memory.free(granule)

    # ── Data granules ───────────────────────────────────────────────────────
    def _install_pages(self, cvm: CVmDescriptor, start: int, count: int, sources: Optional[bytes],
                       measured: bool) -> None:
        """Shared body of the single and block data-create commands; validates fully first."""
        if not 1 <= count <= ENTRIES_PER_TABLE:
            raise InputError(f"block of {count} pages")
        ipas = [start + i * GRANULE_SIZE for i in range(count)]
        for ipa in ipas:
            self._check_protected(cvm, ipa)
            if ipa in cvm.detached:
                raise InputError(f"IPA {ipa:#x} holds a detached data granule")
        contents = [
            sources[i * GRANULE_SIZE:(i + 1) * GRANULE_SIZE] if sources is not None else bytes(GRANULE_SIZE)
            for i in range(count)
        ]

        block_base: Optional[int] = None
        if count == _PAGES_PER_2M and start % _BLOCK_2M == 0:
            w = cvm.ttt.walk(start, 2)
            if w.level == 2 and w.entry is None:
                block_base = self.memory.claim_run(cvm.cvm_id, count, align=_PAGES_PER_2M)
        if block_base is None:
            for ipa in ipas:
                cvm.ttt.check_page_free(ipa)
            if self.memory.free_secure_count(cvm.cvm_id) < count:
                raise OutOfMemory(f"cVM {cvm.cvm_id} needs {count} free granules")

        with _memory_errors():
            if block_base is not None:
                for i, data in enumerate(contents):
                    self.memory.assign(block_base + i, cvm.cvm_id, GranuleState.DATA)
                    self.memory.write(_TMM, block_base + i, data)
                cvm.ttt.map_block(start, 2, block_base, Attrs(protected=True))
            else:
                for ipa, data in zip(ipas, contents):
                    granule = self.memory.claim(cvm.cvm_id, GranuleState.DATA)
                    self.memory.write(_TMM, granule, data)
                    cvm.ttt.map_page(ipa, granule, Attrs(protected=True))
        if measured:
            for ipa, data in zip(ipas, contents):
                cvm.measurement.extend(EventKind.DATA, ipa, hashlib.sha256(data).digest())

    def _require_new(self, cvm_id: int) -> CVmDescriptor:
        cvm = self._cvm(cvm_id)
        if cvm.state is not CVmState.NEW:
            raise StateError(f"cVM {cvm_id} is {cvm.state.value}; no more measured content can be added")
        return cvm

    def _data_create(self, cvm_id: int, ipa: int, source: int) -> None:
        """Copy one measured page from an NS granule; only while NEW."""
        cvm = self._require_new(cvm_id)
        self._install_pages(cvm, ipa, 1, self._read_ns(source), measured=True)

    def _data_create_unknown(self, cvm_id: int, ipa: int) -> None:
        cvm = self._live_cvm(cvm_id)
        self._install_pages(cvm, ipa, 1, None, measured=False)

    def _data_block_create(self, cvm_id: int, start: int, count: int, source_start: int) -> None:
        """Measured multi-page create; a full aligned 2 MiB run becomes one block entry."""
        cvm = self._require_new(cvm_id)
        if not 1 <= count <= ENTRIES_PER_TABLE:
            raise InputError(f"block of {count} pages")
        self._install_pages(cvm, start, count, self._read_ns(source_start, count), measured=True)

    def _data_block_create_unknown(self, cvm_id: int, start: int, count: int) -> None:
        cvm = self._live_cvm(cvm_id)
        self._install_pages(cvm, start, count, None, measured=False)

    def _data_destroy(self, cvm_id: int, ipa: int) -> None:
        """Unmap and scrub one protected data page (or drop a detached one)."""
        cvm = self._live_cvm(cvm_id)
        if ipa in cvm.detached:
            self.memory.free(cvm.detached.pop(ipa))
            return
        entry = cvm.ttt.page_entry(ipa) if ipa % GRANULE_SIZE == 0 else None
        if entry is None or not entry.attrs.protected:
            raise InputError(f"IPA {ipa:#x} does not map a data granule")
        cvm.ttt.unmap_page(ipa)
        self.memory.free(entry.granule)
        self.ledger.record("tlb_flush")

    def _data_block_destroy(self, cvm_id: int, start: int, count: int) -> None:
        cvm = self._live_cvm(cvm_id)
        if start % GRANULE_SIZE or not 1 <= count <= ENTRIES_PER_TABLE:
            raise InputError(f"bad block [{start:#x}, +{count})")
        leaf, level = cvm.ttt.leaf_at(start)
        if count == _PAGES_PER_2M and isinstance(leaf, BlockEntry) and level == 2 and start % _BLOCK_2M == 0:
            cvm.ttt.unmap_block(start, 2)
            for i in range(leaf.pages):
                self.memory.free(leaf.granule + i)
            self.ledger.record("tlb_flush")
            return
        entries: List[Tuple[int, PageEntry]] = []
        for i in range(count):
            ipa = start + i * GRANULE_SIZE
            entry = cvm.ttt.page_entry(ipa)
            if entry is None or not entry.attrs.protected:
                raise InputError(f"IPA {ipa:#x} does not map a data granule")
            entries.append((ipa, entry))
        for ipa, entry in entries:
            cvm.ttt.unmap_page(ipa)
            self.memory.free(entry.granule)
        self.ledger.record("tlb_flush")

    # ── Protected / unprotected mappings ────────────────────────────────────
    def _map_protected(self, cvm_id: int, ipa: int) -> None:
        cvm = self._live_cvm(cvm_id)
        self._check_protected(cvm, ipa)
        granule = cvm.detached.get(ipa)
        if granule is None:
            raise InputError(f"no detached data granule for IPA {ipa:#x}")
        cvm.ttt.map_page(ipa, granule, Attrs(protected=True))
        del cvm.detached[ipa]

    def _unmap_protected(self, cvm_id: int, ipa: int) -> None:
        """Detach a data page from the tree; the granule stays owned until map_protected or data_destroy."""
        cvm = self._live_cvm(cvm_id)
        self._check_protected(cvm, ipa)
        entry = cvm.ttt.page_entry(ipa)
        if entry is None:
            raise InputError(f"IPA {ipa:#x} is not mapped by a page entry")
        cvm.ttt.unmap_page(ipa)
        cvm.detached[ipa] = entry.granule
        self.ledger.record("tlb_flush")

    def _map_unprotected(self, cvm_id: int, ipa: int, ns_granule: int) -> None:
        """Map a free NS granule at an unprotected IPA as shared memory."""
        cvm = self._live_cvm(cvm_id)
        p = cvm.params
        if ipa % GRANULE_SIZE or p.is_protected(ipa) or ipa >= p.mmio_base:
            raise InputError(f"IPA {ipa:#x} is not in the unprotected, non-MMIO range")
        if not 0 <= ns_granule < len(self.memory):
            raise InputError(f"granule {ns_granule} out of range")
        g = self.memory.granule(ns_granule)
        if g.world is not World.NORMAL or g.state is not GranuleState.NS_FREE:
            raise InputError(f"granule {ns_granule} is not a free normal-world granule")
        cvm.ttt.map_page(ipa, ns_granule, Attrs(protected=False))
        cvm.shared.add(ns_granule)

    def _unmap_unprotected(self, cvm_id: int, ipa: int) -> None:
        cvm = self._live_cvm(cvm_id)
        entry = cvm.ttt.page_entry(ipa) if ipa % GRANULE_SIZE == 0 else None
        if entry is None or entry.attrs.protected:
            raise InputError(f"IPA {ipa:#x} is not mapped unprotected")
        cvm.ttt.unmap_page(ipa)
        if not any(g == entry.granule for _, g, a in cvm.ttt.mapped_pages() if not a.protected):
            cvm.shared.discard(entry.granule)
        self.ledger.record("tlb_flush")

    # ── Non-TMI services used by the host and by tooling ────────────────────
    def read_feature_register(self, cvm_id: int, reg: int = 0) -> int:
        with self._gate:
            cvm = self._cvm(cvm_id)
            if cvm.state is not CVmState.ACTIVE or reg != 0:
                raise InputError(f"feature register {reg} of cVM {cvm_id} is not readable")
            return self.features & cvm.params.feature_mask & FEATURE_REGISTER_VALID

    def delegate(self, index: int) -> TmiStatus:
        return self._delegation("delegate", index)

    def undelegate(self, index: int) -> TmiStatus:
        return self._delegation("undelegate", index)

    def _delegation(self, kind: str, index: int) -> TmiStatus:
        with self._gate:
            self._event(kind, granule=index)
            try:
                if any(index in cvm.shared for cvm in self.cvms.values()):
                    raise StateError(f"granule {index} is mapped into a cVM as shared memory")
                with _memory_errors():
                    getattr(self.memory, kind)(index)
            except TmiError as exc:
                logger.debug("%s(%d) rejected: %s", kind, index, exc)
                return exc.status
            return TmiStatus.SUCCESS

    def register_io(self, cvm_id: int, ipa_base: int, pages: int, queue_size: int,
                    shadow_base: Optional[int] = None) -> TmiStatus:
        """Declare the protected IPA run that is mirrored to the shadow for virtio."""
        with self._gate:
            self._event("register_io", cvm=cvm_id, ipa_base=ipa_base, pages=pages,
                        queue_size=queue_size, shadow_base=shadow_base)
            try:
                cvm = self._live_cvm(cvm_id)
                layout = IoLayout.for_pages(ipa_base, pages, queue_size)
                if layout.data_pages < 1:
                    raise InputError(f"{pages} pages cannot hold the rings of queue size {queue_size}")
                secure = []
                for i in range(pages):
                    t = cvm.ttt.resolve(ipa_base + i * GRANULE_SIZE)
                    if t is None or not t.attrs.protected:
                        raise InputError(f"I/O page {ipa_base + i * GRANULE_SIZE:#x} is not mapped protected")
                    secure.append(t.granule)
                shadow = None
                if self.memory.policy is MappingPolicy.DYNAMIC:
                    if shadow_base is None:
                        raise InputError("dynamic policy needs host-supplied shadow granules")
                    shadow = list(range(shadow_base, shadow_base + pages))
                    for index in shadow:
                        if not 0 <= index < len(self.memory) or self.memory.granule(index).state is not GranuleState.NS_FREE:
                            raise InputError(f"shadow granule {index} is not a free normal-world granule")
                try:
                    region = self.sync.register(cvm_id, ipa_base, secure, shadow)
                except ShadowSyncError as exc:
                    raise InputError(str(exc)) from exc
                if shadow is not None:
                    for index in shadow:
                        self.memory.granule(index).state = GranuleState.NS_SHADOW
                cvm.io = IoRegion(ipa_base, pages, queue_size)
                cvm.driver_state.clear()
                logger.debug("cVM %d I/O region at %#x, shadow granules %d..%d",
                             cvm_id, ipa_base, region.shadow[0], region.shadow[-1])
            except TmiError as exc:
                logger.warning("register_io for cVM %d rejected: %s", cvm_id, exc)
                return exc.status
            return TmiStatus.SUCCESS

    def _release_shadow(self, cvm: CVmDescriptor) -> None:
        if self.memory.policy is MappingPolicy.DYNAMIC and cvm.cvm_id in self.sync.regions:
            for index in self.sync.regions[cvm.cvm_id].shadow:
                g = self.memory.granule(index)
                g.zero()
                g.state = GranuleState.NS_FREE
        cvm.io = None

    def io_layout(self, cvm_id: int) -> IoLayout:
        cvm = self._cvm(cvm_id)
        if cvm.io is None:
            raise InputError(f"cVM {cvm_id} has no I/O region")
        return IoLayout.for_pages(cvm.io.ipa_base, cvm.io.pages, cvm.io.queue_size)

    def io_shadow(self, cvm_id: int) -> Tuple[int, ...]:
        return self.sync.region(cvm_id).shadow

    def io_sidecar(self, cvm_id: int) -> Optional[Dict[int, bytes]]:
        prot = self.sync.protection.get(cvm_id)
        return prot.sidecar if prot is not None else None

    def store_io_tags(self, cvm_id: int, tags: Mapping[int, bytes]) -> None:
        """Integrity tags the host kept alongside stored pages, handed back with them."""
        with self._gate:
            self._event("io_tags", cvm=cvm_id, tags={str(page): tag for page, tag in tags.items()})
            prot = self.sync.protection.get(cvm_id)
            if prot is not None:
                prot.sidecar.update(tags)

    def sync_io(self, cvm_id: int, direction: Direction, offset: int = 0, size: Optional[int] = None) -> TransferStats:
        with self._gate:
            self._event("sync", cvm=cvm_id, direction=Direction(direction).value, offset=offset, size=size)
            return self.sync.sync(cvm_id, direction, offset, size)

    def protect_io_pages(self, cvm_id: int, ipas: Sequence[int]) -> TmiStatus:
        with self._gate:
            self._event("protect_io", cvm=cvm_id, ipas=list(ipas))
            cvm = self.cvms.get(cvm_id)
            if cvm is None or cvm.state is not CVmState.ACTIVE:
                return TmiStatus.ERROR_STATE
            try:
                self.sync.protect_pages(cvm_id, ipas, self.platform.io_key(cvm.initial_measurement))
            except ShadowSyncError as exc:
                logger.warning("protect_io for cVM %d rejected: %s", cvm_id, exc)
                return TmiStatus.ERROR_INPUT
            return TmiStatus.SUCCESS

    # ── Invariant scans ─────────────────────────────────────────────────────
    def scan_ttt_soundness(self, cvm_ids: Optional[Iterable[int]] = None) -> List[str]:
        """Walk every mapping of every cVM; report anything the cVM should not reach."""
        problems: List[str] = []
        with self._gate:
            for cvm_id in list(cvm_ids if cvm_ids is not None else self.cvms):
                cvm = self.cvms[cvm_id]
                seen: Dict[int, int] = {}
                for ipa, granule, attrs in cvm.ttt.mapped_pages():
                    g = self.memory.granule(granule)
                    if attrs.protected != cvm.params.is_protected(ipa):
                        problems.append(f"cVM {cvm_id}: IPA {ipa:#x} protected attr disagrees with the limit")
                    if attrs.protected:
                        if g.owner != cvm_id or g.state is not GranuleState.DATA:
                            problems.append(f"cVM {cvm_id}: IPA {ipa:#x} reaches granule {granule} "
                                            f"({g.state.value}, owner {g.owner})")
                        if granule in seen:
                            problems.append(f"cVM {cvm_id}: granule {granule} mapped at {seen[granule]:#x} and {ipa:#x}")
                        seen[granule] = ipa
                    elif g.world is not World.NORMAL or granule not in cvm.shared:
                        problems.append(f"cVM {cvm_id}: unprotected IPA {ipa:#x} reaches non-shared granule {granule}")
                for granule in cvm.ttt.table_granules():
                    g = self.memory.granule(granule)
                    if g.owner != cvm_id or g.state is not GranuleState.TTT:
                        problems.append(f"cVM {cvm_id}: table granule {granule} is {g.state.value}")
        return problems


def _exit_aux(info: ExitInfo) -> int:
    if info.reason is ExitReason.DATA_ABORT:
        return info.write_value
    if info.reason is ExitReason.PSCI:
        return info.psci_target
    if info.reason is ExitReason.HOST_CALL:
        return info.host_call_args[0]
    return 0
