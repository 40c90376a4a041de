# tzcvm_sim/tmm_core/types.py
"""
Wire-level types of the host↔monitor interface.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from host_sim.guest import GuestProgram

from .config import MAX_IPA_WIDTH, MIN_IPA_WIDTH, MMIO_WINDOW

U64 = (1 << 64) - 1


# ─── Status and command identifiers ──────────────────────────────────────────
class TmiStatus(IntEnum):
    SUCCESS = 0
    ERROR_INPUT = 1
    ERROR_STATE = 2
    ERROR_MEMORY = 3
    ERROR_POLICY = 4


class TmiCommand(IntEnum):
    CREATE_CVM = 0x150
    DESTROY_CVM = 0x151
    ACTIVATE_CVM = 0x152
    TEC_CREATE = 0x153
    TEC_DESTROY = 0x154
    TEC_ENTER = 0x155
    CREATE_TTT = 0x156
    DESTROY_TTT = 0x157
    DATA_CREATE = 0x158
    DATA_CREATE_UNKNOWN = 0x159
    DATA_DESTROY = 0x15A
    DATA_BLOCK_CREATE = 0x15B
    DATA_BLOCK_CREATE_UNKNOWN = 0x15C
    DATA_BLOCK_DESTROY = 0x15D
    MAP_PROTECTED = 0x15E
    UNMAP_PROTECTED = 0x15F
    MAP_UNPROTECTED = 0x160
    UNMAP_UNPROTECTED = 0x161
    PSCI_COMPLETE = 0x162


class CVmState(str, Enum):
    NULL = "NULL"
    NEW = "NEW"
    ACTIVE = "ACTIVE"
    SYSTEM_OFF = "SYSTEM_OFF"


# Permitted lifecycle edges; destroy walks NEW|ACTIVE -> SYSTEM_OFF -> NULL in one command.
LIFECYCLE_EDGES = frozenset({
    (CVmState.NULL, CVmState.NEW),
    (CVmState.NEW, CVmState.ACTIVE),
    (CVmState.NEW, CVmState.SYSTEM_OFF),
    (CVmState.ACTIVE, CVmState.SYSTEM_OFF),
    (CVmState.SYSTEM_OFF, CVmState.NULL),
})


class HashAlgo(IntEnum):
    SHA256 = 0


class PsciFunction(IntEnum):
    CPU_OFF = 0x8400_0002
    SYSTEM_OFF = 0x8400_0008
    CPU_ON = 0xC400_0003


class PsciOutcome(IntEnum):
    SUCCESS = 0
    DENIED = 1


# ─── Requests and responses ──────────────────────────────────────────────────
@dataclass(frozen=True)
class TmiRequest:
    command: int
    args: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.args) > 7:
            raise ValueError("a TMI carries at most 7 arguments")


@dataclass(frozen=True)
class TmiResponse:
    status: TmiStatus
    results: Tuple[int, ...] = ()
    exit: Optional["ExitInfo"] = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.status is TmiStatus.SUCCESS

    def result(self, i: int = 0) -> int:
        return self.results[i] if i < len(self.results) else 0


# ─── Exit reporting ──────────────────────────────────────────────────────────
class ExitReason(IntEnum):
    IRQ = 1
    HOST_CALL = 2
    PSCI = 3
    DATA_ABORT = 4
    SYSTEM_OFF = 5
    QUANTUM = 6


@dataclass(frozen=True)
class ExitInfo:
    """
    Everything the host learns about an exit. Constructed only from the
    sanctioned fields; no other guest register state is ever copied in.
    """
    reason: ExitReason
    fault_ipa: int = 0
    fault_write: bool = False
    write_value: int = 0
    host_call_args: Tuple[int, ...] = (0,) * 7
    psci_function: int = 0
    psci_target: int = 0
    psci_entry: int = 0
    idle: bool = False

    def encode(self) -> bytes:
        return struct.pack(
            "<BQ?Q7QIQQ?",
            int(self.reason), self.fault_ipa, self.fault_write, self.write_value,
            *self.host_call_args, self.psci_function, self.psci_target, self.psci_entry, self.idle,
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "reason": self.reason.name,
            "fault_ipa": self.fault_ipa,
            "fault_write": self.fault_write,
            "write_value": self.write_value,
            "host_call_args": list(self.host_call_args),
            "psci_function": self.psci_function,
            "psci_target": self.psci_target,
            "psci_entry": self.psci_entry,
            "idle": self.idle,
        }

    @classmethod
    def host_call(cls, args: Tuple[int, ...]) -> "ExitInfo":
        return cls(ExitReason.HOST_CALL, host_call_args=tuple(args[:7]) + (0,) * (7 - len(args[:7])))

    @classmethod
    def data_abort(cls, ipa: int, write: bool = False, value: int = 0) -> "ExitInfo":
        return cls(ExitReason.DATA_ABORT, fault_ipa=ipa, fault_write=write, write_value=value if write else 0)


# ─── List registers (packed into one 64-bit TMI word) ────────────────────────
class LrState(IntEnum):
    INVALID = 0
    PENDING = 1
    ACTIVE = 2


@dataclass(frozen=True)
class ListRegister:
    intid: int
    state: LrState = LrState.PENDING

    def pack(self) -> int:
        return 0x8000 | (int(self.state) & 0x3) << 13 | (self.intid & 0x1FFF)

    @classmethod
    def unpack(cls, half: int) -> Optional["ListRegister"]:
        if not half & 0x8000:
            return None
        return cls(intid=half & 0x1FFF, state=LrState((half >> 13) & 0x3))


def pack_list_registers(lrs: List[Optional[ListRegister]]) -> int:
    word = 0
    for slot, lr in enumerate(lrs[:4]):
        if lr is not None:
            word |= lr.pack() << (16 * slot)
    return word


def unpack_list_registers(word: int, count: int = 4) -> List[Optional[ListRegister]]:
    return [ListRegister.unpack((word >> (16 * slot)) & 0xFFFF) for slot in range(count)]


# ─── Structured inputs written by the host into NS granules ──────────────────
_PARAMS_FMT = "<4sBIQBQ"
_PARAMS_MAGIC = b"CVMP"


class CVmParams(BaseModel):
    """Creation parameters; all of them are measured, vCPU count included."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    ipa_width: int = Field(40, ge=MIN_IPA_WIDTH, le=MAX_IPA_WIDTH)
    vcpu_count: int = Field(1, ge=0, le=0xFFFF_FFFF)
    protected_ipa_limit: int = Field(1 << 39, ge=0)
    hash_algo: int = Field(int(HashAlgo.SHA256), ge=0, le=255)
    feature_mask: int = Field(0, ge=0, le=U64)

    @model_validator(mode="after")
    def _limit_fits(self) -> "CVmParams":
        if self.protected_ipa_limit > 1 << self.ipa_width:
            raise ValueError("protected_ipa_limit exceeds the IPA space")
        return self

    def encode(self) -> bytes:
        """Measured encoding."""
        return struct.pack(
            _PARAMS_FMT, _PARAMS_MAGIC, self.ipa_width, self.vcpu_count, self.protected_ipa_limit,
            self.hash_algo, self.feature_mask,
        )

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def to_page(self) -> bytes:
        return self.encode()

    @classmethod
    def from_page(cls, raw: bytes) -> "CVmParams":
        magic, width, vcpus, limit, algo, mask = struct.unpack_from(_PARAMS_FMT, raw)
        if magic != _PARAMS_MAGIC:
            raise ValueError("params page has no CVMP header")
        return cls(ipa_width=width, vcpu_count=vcpus, protected_ipa_limit=limit,
                   hash_algo=algo, feature_mask=mask)

    @property
    def mmio_base(self) -> int:
        return (1 << self.ipa_width) - MMIO_WINDOW

    def is_protected(self, ipa: int) -> bool:
        return ipa < self.protected_ipa_limit


_TEC_FMT = "<Q8Q"


class TecParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    entry_pc: int = Field(0, ge=0)
    gprs: Tuple[int, ...] = Field((0,) * 8, min_length=8, max_length=8)
    program: GuestProgram = Field(default_factory=GuestProgram)

    def encode(self) -> bytes:
        head = struct.pack(_TEC_FMT, self.entry_pc, *(g & U64 for g in self.gprs))
        return head + self.program.canonical()

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def to_pages(self) -> bytes:
        """Length-prefixed encoding as the host stages it across NS granules."""
        body = self.encode()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def from_pages(cls, raw: bytes) -> "TecParams":
        (length,) = struct.unpack_from("<I", raw)
        body = raw[4:4 + length]
        if len(body) != length:
            raise ValueError("truncated TEC params")
        head = struct.calcsize(_TEC_FMT)
        entry, *gprs = struct.unpack_from(_TEC_FMT, body)
        return cls(entry_pc=entry, gprs=tuple(gprs), program=GuestProgram.from_canonical(body[head:]))
