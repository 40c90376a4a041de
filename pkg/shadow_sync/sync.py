# tzcvm_sim/shadow_sync/sync.py
"""
Secure↔shadow copies behind one transfer interface.

Under the direct policy every secure page has a fixed shadow at
`base + shadow_offset`, so a transfer is a plain copy. Under the dynamic
policy the shadow has to be mapped into the monitor for the duration of each
transfer and unmapped (with a TLB flush) afterwards.
"""
from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from mem_model.config import GRANULE_SIZE
from mem_model.granules import MappingPolicy, Requestor, World
from mem_model.memory import PhysicalMemory

from .errors import NotSharedRegion, RegionOutOfBounds, TokenLeak
from .ledger import CostLedger
from .protection import PageProtection

logger = logging.getLogger(__name__)

_TMM = Requestor.tmm()


class Direction(str, Enum):
    SECURE_TO_SHADOW = "SecureToShadow"
    SHADOW_TO_SECURE = "ShadowToSecure"


@dataclass(frozen=True)
class SyncRegion:
    """IPA-contiguous run of secure pages paired with their shadow granules."""
    cvm_id: int
    ipa_base: int
    secure: Tuple[int, ...]
    shadow: Tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.secure) * GRANULE_SIZE

    @property
    def first_page(self) -> int:
        return self.ipa_base // GRANULE_SIZE

    def contains_ipa(self, ipa: int) -> bool:
        return self.ipa_base <= ipa < self.ipa_base + self.size


@dataclass(frozen=True)
class TransferToken:
    cvm_id: int
    direction: Direction
    offset: int
    size: int
    policy: MappingPolicy
    mapping_handle: Optional[int] = None    # dynamic only


@dataclass
class TransferStats:
    direction: Direction
    policy: MappingPolicy
    bytes: int
    pages: int
    protected_pages: int = 0
    integrity_failures: int = 0
    counters: Dict[str, int] = field(default_factory=dict)


class ShadowSync:
    def __init__(self, memory: PhysicalMemory, ledger: Optional[CostLedger] = None):
        self.memory = memory
        self.ledger = ledger or memory.ledger
        self.regions: Dict[int, SyncRegion] = {}
        self.protection: Dict[int, PageProtection] = {}
        self._open: Dict[int, TransferToken] = {}
        self._handles = itertools.count(1)
        self._lock = threading.Lock()

    # ── Registration ────────────────────────────────────────────────────────
    def register(self, cvm_id: int, ipa_base: int, secure: Sequence[int],
                 shadow: Optional[Sequence[int]] = None) -> SyncRegion:
        """Pair `secure` pages with shadows: fixed offset (direct) or host-supplied (dynamic)."""
        if ipa_base % GRANULE_SIZE:
            raise RegionOutOfBounds(f"vring base {ipa_base:#x} is not page aligned")
        if shadow is None:
            secure_region = self.memory.region_of(cvm_id)
            if secure_region is None:
                raise RegionOutOfBounds(f"cVM {cvm_id} has no fixed region; supply shadow granules")
            try:
                shadow = [secure_region.shadow_of(g) for g in secure]
            except ValueError as exc:
                raise RegionOutOfBounds(str(exc)) from exc
        if len(shadow) != len(secure):
            raise RegionOutOfBounds("secure and shadow runs differ in length")
        for g in secure:
            if self.memory.granule(g).owner != cvm_id:
                raise RegionOutOfBounds(f"granule {g} is not owned by cVM {cvm_id}")
        for g in shadow:
            if self.memory.granule(g).world is not World.NORMAL:
                raise RegionOutOfBounds(f"shadow granule {g} is not in normal memory")
        region = SyncRegion(cvm_id, ipa_base, tuple(secure), tuple(shadow))
        self.regions[cvm_id] = region
        logger.debug("Registered sync region for cVM %d at IPA %#x (%d pages)", cvm_id, ipa_base, len(secure))
        return region

    def unregister(self, cvm_id: int) -> None:
        self.regions.pop(cvm_id, None)
        self.protection.pop(cvm_id, None)
        self._open.pop(cvm_id, None)

    def region(self, cvm_id: int) -> SyncRegion:
        region = self.regions.get(cvm_id)
        if region is None:
            raise RegionOutOfBounds(f"cVM {cvm_id} has no registered sync region")
        return region

    # ── Page protection ─────────────────────────────────────────────────────
    def protect_pages(self, cvm_id: int, ipas: Iterable[int], key: bytes) -> PageProtection:
        region = self.regions.get(cvm_id)
        ipas = list(ipas)
        if region is None or not all(region.contains_ipa(ipa) for ipa in ipas):
            raise NotSharedRegion(f"IPAs {[hex(i) for i in ipas]} are outside cVM {cvm_id}'s shared region")
        prot = self.protection.get(cvm_id)
        if prot is None:
            prot = self.protection[cvm_id] = PageProtection(cvm_id, key)
        prot.protect(ipa // GRANULE_SIZE for ipa in ipas)
        return prot

    def unprotect_pages(self, cvm_id: int, ipas: Iterable[int]) -> None:
        region = self.regions.get(cvm_id)
        ipas = list(ipas)
        if region is None or not all(region.contains_ipa(ipa) for ipa in ipas):
            raise NotSharedRegion(f"IPAs {[hex(i) for i in ipas]} are outside cVM {cvm_id}'s shared region")
        prot = self.protection.get(cvm_id)
        if prot is not None:
            prot.unprotect(ipa // GRANULE_SIZE for ipa in ipas)

    # ── Transfers ───────────────────────────────────────────────────────────
    def begin_transfer(self, cvm_id: int, direction: Direction, offset: int = 0,
                       size: Optional[int] = None, policy: Optional[MappingPolicy] = None) -> TransferToken:
        region = self.region(cvm_id)
        policy = MappingPolicy(policy or self.memory.policy)
        size = region.size - offset if size is None else size
        if offset < 0 or size <= 0 or offset + size > region.size:
            raise RegionOutOfBounds(f"[{offset}, {offset + size}) outside a {region.size}-byte region")
        if policy is MappingPolicy.DIRECT:
            return TransferToken(cvm_id, Direction(direction), offset, size, policy)
        with self._lock:
            if cvm_id in self._open:
                raise TokenLeak(f"cVM {cvm_id} already has a mapped transfer in flight")
            token = TransferToken(cvm_id, Direction(direction), offset, size, policy, next(self._handles))
            self._open[cvm_id] = token
        return token

    def complete_transfer(self, token: TransferToken) -> TransferStats:
        region = self.region(token.cvm_id)
        if token.policy is MappingPolicy.DYNAMIC:
            with self._lock:
                if self._open.get(token.cvm_id) != token:
                    raise TokenLeak(f"token {token.mapping_handle} is not the open transfer of cVM {token.cvm_id}")
        try:
            stats = self._copy(region, token)
        finally:
            if token.policy is MappingPolicy.DYNAMIC:
                with self._lock:
                    self._open.pop(token.cvm_id, None)
        extra = {"integrity_failures": stats.integrity_failures}
        if token.policy is MappingPolicy.DYNAMIC:
            extra.update(stage2_map=1, stage2_unmap=1, tlb_flush=1)
        self.ledger.record_transfer(token.size, **extra)
        stats.counters = {"bytes_copied": token.size, "sync_transfers": 1, **extra}
        return stats

    def sync(self, cvm_id: int, direction: Direction, offset: int = 0,
             size: Optional[int] = None, policy: Optional[MappingPolicy] = None) -> TransferStats:
        token = self.begin_transfer(cvm_id, direction, offset, size, policy)
        return self.complete_transfer(token)

    def _copy(self, region: SyncRegion, token: TransferToken) -> TransferStats:
        out = token.direction is Direction.SECURE_TO_SHADOW
        prot = self.protection.get(region.cvm_id)
        stats = TransferStats(token.direction, token.policy, token.size, 0)
        first = token.offset // GRANULE_SIZE
        last = (token.offset + token.size - 1) // GRANULE_SIZE
        for page in range(first, last + 1):
            src, dst = (region.secure[page], region.shadow[page]) if out else (region.shadow[page], region.secure[page])
            ipa_page = region.first_page + page
            stats.pages += 1
            if prot is not None and prot.covers(ipa_page):
                stats.protected_pages += 1
                data = self.memory.read(_TMM, src)
                if out:
                    self.memory.write(_TMM, dst, prot.seal_out(ipa_page, data))
                    continue
                plain = prot.open_in(ipa_page, data)
                if plain is None:
                    stats.integrity_failures += 1
                    plain = bytes(GRANULE_SIZE)
                self.memory.write(_TMM, dst, plain)
                continue
            lo = max(token.offset, page * GRANULE_SIZE) - page * GRANULE_SIZE
            hi = min(token.offset + token.size, (page + 1) * GRANULE_SIZE) - page * GRANULE_SIZE
            self.memory.write(_TMM, dst, self.memory.read(_TMM, src, lo, hi - lo), lo)
        return stats

    def open_transfers(self) -> List[TransferToken]:
        with self._lock:
            return list(self._open.values())
