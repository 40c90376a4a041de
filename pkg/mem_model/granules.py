# tzcvm_sim/mem_model/granules.py

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Tuple

from .config import GRANULE_SIZE, MAX_TZASC_REGIONS
from .errors import OverlappingRegions, RegionLimitExceeded, RegionOutOfBounds


# ─── Enumerations ────────────────────────────────────────────────────────────
class World(str, Enum):
    NORMAL = "Normal"
    SECURE = "Secure"


class GranuleState(str, Enum):
    NS_FREE = "NsFree"
    NS_SHADOW = "NsShadow"
    SECURE_FREE = "SecureFree"
    DELEGATED = "Delegated"
    DATA = "Data"
    TTT = "Ttt"
    TEC = "Tec"
    PARAMS = "Params"


NORMAL_STATES = frozenset({GranuleState.NS_FREE, GranuleState.NS_SHADOW})
ASSIGNED_STATES = frozenset({GranuleState.DATA, GranuleState.TTT, GranuleState.TEC, GranuleState.PARAMS})


class MappingPolicy(str, Enum):
    DIRECT = "direct"
    DYNAMIC = "dynamic"


class AccessMode(str, Enum):
    READ = "Read"
    WRITE = "Write"


class AccessResult(str, Enum):
    ALLOWED = "Allowed"
    FAULT = "Fault"


class RequestorKind(str, Enum):
    HOST = "Host"
    TMM = "Tmm"
    CVM = "CVm"


# ─── Requestor ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Requestor:
    kind: RequestorKind
    cvm_id: Optional[int] = None

    @classmethod
    def host(cls) -> "Requestor":
        return cls(RequestorKind.HOST)

    @classmethod
    def tmm(cls) -> "Requestor":
        return cls(RequestorKind.TMM)

    @classmethod
    def cvm(cls, cvm_id: int) -> "Requestor":
        return cls(RequestorKind.CVM, cvm_id)

    def __str__(self) -> str:
        if self.kind is RequestorKind.CVM:
            return f"CVm({self.cvm_id})"
        return self.kind.value


# ─── Granule ─────────────────────────────────────────────────────────────────
@dataclass
class Granule:
    """One 4 KiB frame with its world attribute, lifecycle state and owner."""
    index: int
    world: World = World.NORMAL
    state: GranuleState = GranuleState.NS_FREE
    owner: Optional[int] = None
    contents: bytearray = field(default_factory=lambda: bytearray(GRANULE_SIZE), repr=False)

    def zero(self) -> None:
        self.contents[:] = bytes(GRANULE_SIZE)

    def is_zero(self) -> bool:
        return not any(self.contents)


# ─── TZASC ───────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class TzascRegion:
    base: int
    count: int
    secure: bool

    @property
    def end(self) -> int:
        return self.base + self.count


@dataclass(frozen=True)
class TzascConfig:
    """Ordered, non-overlapping list of at most eight DRAM regions."""
    regions: Tuple[TzascRegion, ...]

    @classmethod
    def from_entries(cls, entries: Iterable[dict]) -> "TzascConfig":
        return cls(tuple(TzascRegion(int(e["base"]), int(e["count"]), bool(e["secure"])) for e in entries))

    @classmethod
    def split(cls, total: int, secure: int) -> "TzascConfig":
        """One secure region at the bottom of memory followed by one normal region."""
        regions: List[TzascRegion] = []
        if secure:
            regions.append(TzascRegion(0, secure, True))
        if total - secure:
            regions.append(TzascRegion(secure, total - secure, False))
        return cls(tuple(regions))

    def checked(self, total_granules: Optional[int] = None) -> "TzascConfig":
        """Return a base-sorted copy, raising if the layout breaks a controller rule."""
        if len(self.regions) > MAX_TZASC_REGIONS:
            raise RegionLimitExceeded(
                f"{len(self.regions)} regions requested; controller supports {MAX_TZASC_REGIONS}"
            )
        ordered = tuple(sorted(self.regions, key=lambda r: r.base))
        for region in ordered:
            if region.count <= 0 or region.base < 0:
                raise RegionOutOfBounds(f"region {region} is empty or negative")
            if total_granules is not None and region.end > total_granules:
                raise RegionOutOfBounds(f"region {region} exceeds {total_granules} granules")
        for prev, nxt in zip(ordered, ordered[1:]):
            if nxt.base < prev.end:
                raise OverlappingRegions(f"regions {prev} and {nxt} overlap")
        return TzascConfig(ordered)

    def world_of(self, index: int) -> World:
        for region in self.regions:
            if region.base <= index < region.end:
                return World.SECURE if region.secure else World.NORMAL
        return World.NORMAL


# ─── Secure region (direct mapping) ──────────────────────────────────────────
@dataclass(frozen=True)
class SecureRegion:
    cvm_id: int
    base: int
    count: int
    shadow_offset: int

    @property
    def shadow_base(self) -> int:
        return self.base + self.shadow_offset

    def contains(self, index: int) -> bool:
        return self.base <= index < self.base + self.count

    def shadow_of(self, index: int) -> int:
        if not self.contains(index):
            raise ValueError(f"granule {index} is outside the region of cVM {self.cvm_id}")
        return index + self.shadow_offset

    def granules(self) -> range:
        return range(self.base, self.base + self.count)

    def shadow_granules(self) -> range:
        return range(self.shadow_base, self.shadow_base + self.count)
