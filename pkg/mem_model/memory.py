# tzcvm_sim/mem_model/memory.py

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

from shadow_sync.ledger import CostLedger

from .config import GRANULE_SIZE, settings
from .errors import (
    AccessFault,
    OutOfSecureMemory,
    OutOfShadowMemory,
    PolicyMismatch,
    SetupPhaseClosed,
    UnknownCVm,
    WrongState,
)
from .granules import (
    ASSIGNED_STATES,
    NORMAL_STATES,
    AccessMode,
    AccessResult,
    Granule,
    GranuleState,
    MappingPolicy,
    Requestor,
    RequestorKind,
    SecureRegion,
    TzascConfig,
    World,
)
from .gst import DelegationStatus, GranuleStatusTable

logger = logging.getLogger(__name__)

HostWriteObserver = Callable[[int, int, bytes], None]


@dataclass(frozen=True)
class AuditEntry:
    requestor: str
    index: int
    mode: AccessMode
    world: World
    result: AccessResult


# ─── Physical memory ─────────────────────────────────────────────────────────
class PhysicalMemory:
    """
    Granule table of the simulated platform.

    Every byte access goes through `check_access`; the most recent Host accesses
    (`settings.audit_limit` of them) are audited so tests can prove the host
    never touched Secure-world memory.
    """

    def __init__(
        self,
        granules: Optional[int] = None,
        policy: MappingPolicy = MappingPolicy.DIRECT,
        ledger: Optional[CostLedger] = None,
        tzasc: Optional[TzascConfig] = None,
    ):
        count = granules if granules is not None else settings.granules
        self.policy = MappingPolicy(policy)
        self.ledger = ledger or CostLedger()
        self.granules: List[Granule] = [Granule(i) for i in range(count)]
        self.regions: Dict[int, SecureRegion] = {}
        self.gst: Optional[GranuleStatusTable] = (
            GranuleStatusTable(count) if self.policy is MappingPolicy.DYNAMIC else None
        )
        self.audit: Deque[AuditEntry] = deque(maxlen=settings.audit_limit)
        self.host_write_observer: Optional[HostWriteObserver] = None
        self.tzasc = TzascConfig(())
        if tzasc is None:
            secure = 0 if self.policy is MappingPolicy.DYNAMIC else min(settings.secure_granules, count // 2)
            tzasc = TzascConfig.split(count, secure)
        self.configure_tzasc(tzasc)

    def __len__(self) -> int:
        return len(self.granules)

    def granule(self, index: int) -> Granule:
        if not 0 <= index < len(self.granules):
            raise IndexError(f"granule {index} out of range [0, {len(self.granules)})")
        return self.granules[index]

    # ── TZASC ───────────────────────────────────────────────────────────────
    def _setup_phase(self) -> bool:
        return not self.regions and all(g.owner is None for g in self.granules) and (
            self.gst is None or all(self.gst.status(i) is DelegationStatus.UNDELEGATED for i in self.gst)
        )

    def configure_tzasc(self, cfg: TzascConfig) -> None:
        if not self._setup_phase():
            raise SetupPhaseClosed("TZASC can only be programmed before any cVM exists")
        checked = cfg.checked(len(self.granules))
        self.tzasc = checked
        for g in self.granules:
            g.world = checked.world_of(g.index)
            g.state = GranuleState.SECURE_FREE if g.world is World.SECURE else GranuleState.NS_FREE
            g.owner = None
        logger.debug("TZASC programmed with %d regions", len(checked.regions))

    # ── Access gate ─────────────────────────────────────────────────────────
    def check_access(self, requestor: Requestor, index: int, mode: AccessMode) -> AccessResult:
        g = self.granule(index)
        if requestor.kind is RequestorKind.TMM:
            result = AccessResult.ALLOWED
        elif requestor.kind is RequestorKind.HOST:
            result = AccessResult.FAULT if g.world is World.SECURE else AccessResult.ALLOWED
        elif g.world is World.NORMAL:
            result = AccessResult.ALLOWED
        else:
            result = AccessResult.ALLOWED if g.owner == requestor.cvm_id else AccessResult.FAULT
        if requestor.kind is RequestorKind.HOST:
            self.audit.append(AuditEntry(str(requestor), index, AccessMode(mode), g.world, result))
        return result

    def read(self, requestor: Requestor, index: int, offset: int = 0, length: int = GRANULE_SIZE) -> bytes:
        _check_span(offset, length)
        if self.check_access(requestor, index, AccessMode.READ) is AccessResult.FAULT:
            raise AccessFault(requestor, index, AccessMode.READ)
        return bytes(self.granules[index].contents[offset:offset + length])

    def write(self, requestor: Requestor, index: int, data: bytes, offset: int = 0) -> None:
        _check_span(offset, len(data))
        if self.check_access(requestor, index, AccessMode.WRITE) is AccessResult.FAULT:
            raise AccessFault(requestor, index, AccessMode.WRITE)
        self.granules[index].contents[offset:offset + len(data)] = data
        if requestor.kind is RequestorKind.HOST and self.host_write_observer is not None:
            self.host_write_observer(index, offset, bytes(data))

    # ── Direct policy: fixed regions ────────────────────────────────────────
    def _first_fit(self, count: int, accept: Callable[[Granule], bool]) -> Optional[int]:
        run = 0
        for g in self.granules:
            run = run + 1 if accept(g) else 0
            if run == count:
                return g.index - count + 1
        return None

    def reserve_secure_region(self, cvm_id: int, count: int) -> SecureRegion:
        if self.policy is not MappingPolicy.DIRECT:
            raise PolicyMismatch("fixed secure regions exist only under the direct policy")
        if cvm_id in self.regions:
            raise WrongState(f"cVM {cvm_id} already holds a secure region")
        if count <= 0:
            raise OutOfSecureMemory("region size must be positive")
        base = self._first_fit(
            count,
            lambda g: g.world is World.SECURE and g.state is GranuleState.SECURE_FREE and g.owner is None,
        )
        if base is None:
            raise OutOfSecureMemory(f"no contiguous run of {count} free secure granules")
        shadow = self._first_fit(count, lambda g: g.state is GranuleState.NS_FREE)
        if shadow is None:
            raise OutOfShadowMemory(f"no contiguous run of {count} free normal granules for the shadow")
        region = SecureRegion(cvm_id=cvm_id, base=base, count=count, shadow_offset=shadow - base)
        for i in region.granules():
            self.granules[i].owner = cvm_id
            self.granules[i].state = GranuleState.SECURE_FREE
        for i in region.shadow_granules():
            self.granules[i].state = GranuleState.NS_SHADOW
        self.regions[cvm_id] = region
        logger.debug("Reserved %s", region)
        return region

    def release_secure_region(self, cvm_id: int) -> None:
        region = self.regions.pop(cvm_id, None)
        if region is None:
            raise UnknownCVm(f"no secure region for cVM {cvm_id}")
        for i in region.granules():
            g = self.granules[i]
            g.zero()
            g.owner = None
            g.state = GranuleState.SECURE_FREE
        for i in region.shadow_granules():
            self.granules[i].state = GranuleState.NS_FREE
        logger.debug("Released and scrubbed %s", region)

    def region_of(self, cvm_id: int) -> Optional[SecureRegion]:
        return self.regions.get(cvm_id)

    # ── Dynamic policy: delegation ──────────────────────────────────────────
    def _require_dynamic(self) -> GranuleStatusTable:
        if self.gst is None:
            raise PolicyMismatch("delegation is not used under the direct policy")
        return self.gst

    def delegate(self, index: int) -> None:
        gst = self._require_dynamic()
        g = self.granule(index)
        if g.state is not GranuleState.NS_FREE:
            raise WrongState(f"granule {index} is {g.state.value}, expected NsFree")
        gst.transition(index, DelegationStatus.DELEGATED)
        g.zero()
        g.world = World.SECURE
        g.state = GranuleState.DELEGATED
        self.ledger.record_many(smc_calls=1, world_switch=1, tlb_flush=1)

    def undelegate(self, index: int) -> None:
        gst = self._require_dynamic()
        g = self.granule(index)
        if g.state is not GranuleState.DELEGATED:
            raise WrongState(f"granule {index} is {g.state.value}, expected Delegated")
        gst.transition(index, DelegationStatus.UNDELEGATED)
        g.zero()
        g.world = World.NORMAL
        g.state = GranuleState.NS_FREE
        self.ledger.record_many(smc_calls=1, world_switch=1, tlb_flush=1)

    # ── Monitor-side claim/free (both policies) ─────────────────────────────
    def claim(self, cvm_id: int, state: GranuleState) -> int:
        """Hand the lowest free secure granule available to `cvm_id` a new role."""
        if state not in ASSIGNED_STATES:
            raise WrongState(f"cannot claim a granule into {state.value}")
        if self.policy is MappingPolicy.DIRECT:
            region = self.regions.get(cvm_id)
            if region is None:
                raise UnknownCVm(f"no secure region for cVM {cvm_id}")
            index = next(
                (i for i in region.granules() if self.granules[i].state is GranuleState.SECURE_FREE),
                None,
            )
        else:
            index = self.gst.lowest(DelegationStatus.DELEGATED)
        if index is None:
            raise OutOfSecureMemory(f"cVM {cvm_id} has no free secure granule")
        self.assign(index, cvm_id, state)
        return index

    def claim_run(self, cvm_id: int, count: int, align: int = 1) -> Optional[int]:
        """Lowest `align`-aligned run of `count` free granules for `cvm_id`, unassigned."""
        if self.policy is MappingPolicy.DIRECT:
            region = self.regions.get(cvm_id)
            if region is None:
                return None
            free = lambda i: self.granules[i].state is GranuleState.SECURE_FREE and region.contains(i)  # noqa: E731
        else:
            free = lambda i: self.gst.status(i) is DelegationStatus.DELEGATED  # noqa: E731
        for base in range(0, len(self.granules) - count + 1, align):
            if all(free(i) for i in range(base, base + count)):
                return base
        return None

    def free_secure_count(self, cvm_id: int) -> int:
        """Granules `claim` could still hand to `cvm_id`."""
        if self.policy is MappingPolicy.DIRECT:
            region = self.regions.get(cvm_id)
            if region is None:
                return 0
            return sum(1 for i in region.granules() if self.granules[i].state is GranuleState.SECURE_FREE)
        return sum(1 for i in self.gst if self.gst.status(i) is DelegationStatus.DELEGATED)

    def assign(self, index: int, cvm_id: int, state: GranuleState) -> None:
        g = self.granule(index)
        if self.policy is MappingPolicy.DIRECT:
            if g.state is not GranuleState.SECURE_FREE or g.owner != cvm_id:
                raise WrongState(f"granule {index} not free in cVM {cvm_id}'s region")
        else:
            self.gst.transition(index, DelegationStatus.ASSIGNED)
            g.owner = cvm_id
        g.state = state

    def free(self, index: int) -> None:
        """Scrub an assigned granule and return it to its policy's free pool."""
        g = self.granule(index)
        if g.state not in ASSIGNED_STATES:
            raise WrongState(f"granule {index} is {g.state.value}; nothing to free")
        g.zero()
        if self.policy is MappingPolicy.DIRECT:
            g.state = GranuleState.SECURE_FREE
        else:
            self.gst.transition(index, DelegationStatus.DELEGATED)
            g.state = GranuleState.DELEGATED
            g.owner = None

    # ── Scans used by invariant checks ──────────────────────────────────────
    def owned_by(self, cvm_id: int) -> List[int]:
        return [g.index for g in self.granules if g.owner == cvm_id]

    def snapshot_owners(self) -> Dict[int, Tuple[GranuleState, Optional[int]]]:
        """(state, owner) of every granule that is not plain NsFree."""
        return {
            g.index: (g.state, g.owner)
            for g in self.granules if g.state is not GranuleState.NS_FREE or g.owner is not None
        }

    def scan_invariants(self) -> List[str]:
        """Return human-readable violations of the memory invariants (empty when sound)."""
        problems: List[str] = []
        for g in self.granules:
            if len(g.contents) != GRANULE_SIZE:
                problems.append(f"granule {g.index} has {len(g.contents)} bytes")
            if (g.world is World.SECURE) != (g.state not in NORMAL_STATES):
                problems.append(f"granule {g.index} world {g.world.value} disagrees with {g.state.value}")
            if self.policy is MappingPolicy.DIRECT:
                owned_state = g.state in ASSIGNED_STATES or (g.state is GranuleState.SECURE_FREE and g.owner is not None)
                if g.state in ASSIGNED_STATES and g.owner is None:
                    problems.append(f"granule {g.index} in {g.state.value} without owner")
                if g.owner is not None and not owned_state:
                    problems.append(f"granule {g.index} owned while {g.state.value}")
            elif (g.owner is not None) != (g.state in ASSIGNED_STATES):
                problems.append(f"granule {g.index} ownership inconsistent with {g.state.value}")
        seen: Dict[int, int] = {}
        for cvm_id, region in self.regions.items():
            for i in region.granules():
                if i in seen:
                    problems.append(f"granule {i} in regions of cVM {seen[i]} and cVM {cvm_id}")
                seen[i] = cvm_id
                if self.granules[i].owner not in (cvm_id,):
                    problems.append(f"granule {i} in cVM {cvm_id}'s region owned by {self.granules[i].owner}")
            if any(self.granules[i].world is not World.NORMAL for i in region.shadow_granules()):
                problems.append(f"shadow of cVM {cvm_id} intersects secure memory")
        for entry in self.audit:
            if entry.world is World.SECURE and entry.result is AccessResult.ALLOWED:
                problems.append(f"host access to secure granule {entry.index} was allowed")
        return problems

    def host_secure_touches(self) -> List[Tuple[int, AccessMode]]:
        """Host accesses that were attempted against Secure-world granules (all faulted)."""
        return [(e.index, e.mode) for e in self.audit if e.world is World.SECURE]


def _check_span(offset: int, length: int) -> None:
    if offset < 0 or length < 0 or offset + length > GRANULE_SIZE:
        raise ValueError(f"span [{offset}, {offset + length}) exceeds one granule")
