# tzcvm_sim/tmm_core/measurement.py
"""
Hash-chain measurement of a cVM's initial contents, PCR style.

    current' = SHA-256(current ‖ kind:u8 ‖ ipa:u64le ‖ content_digest)

The chain starts at SHA-256 of the measured parameter encoding. Runtime
extensible measurement (REM) slots start at zero and are extended with
SHA-256(rem ‖ value).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, List, Tuple

from .config import REM_SLOTS
from .errors import Sealed

DIGEST_SIZE = 32


class EventKind(IntEnum):
    DATA = 1
    TEC = 2


@dataclass(frozen=True)
class MeasurementEvent:
    kind: EventKind
    ipa: int
    digest: bytes


def extend_digest(current: bytes, kind: int, ipa: int, content_digest: bytes) -> bytes:
    return hashlib.sha256(current + struct.pack("<BQ", kind, ipa) + content_digest).digest()


def fold(initial: bytes, events: Iterable[MeasurementEvent]) -> bytes:
    current = initial
    for event in events:
        current = extend_digest(current, event.kind, event.ipa, event.digest)
    return current


@dataclass
class MeasurementState:
    initial: bytes
    current: bytes = b""
    log: List[MeasurementEvent] = field(default_factory=list)
    sealed: bool = False

    def __post_init__(self) -> None:
        if not self.current:
            self.current = self.initial

    @classmethod
    def open(cls, params_digest: bytes) -> "MeasurementState":
        return cls(initial=params_digest)

    def extend(self, kind: EventKind, ipa: int, content_digest: bytes) -> bytes:
        if self.sealed:
            raise Sealed("measurement log is sealed")
        event = MeasurementEvent(EventKind(kind), ipa, content_digest)
        self.current = extend_digest(self.current, event.kind, event.ipa, event.digest)
        self.log.append(event)
        return self.current

    def seal(self) -> bytes:
        self.sealed = True
        return self.current

    def consistent(self) -> bool:
        return fold(self.initial, self.log) == self.current


def extend_measurement(state: MeasurementState, kind: EventKind, ipa: int, content_digest: bytes) -> MeasurementState:
    """Functional form: extends `state` in place and returns it."""
    state.extend(kind, ipa, content_digest)
    return state


@dataclass
class ExtensibleMeasurements:
    slots: List[bytes] = field(default_factory=lambda: [bytes(DIGEST_SIZE)] * REM_SLOTS)

    def extend(self, slot: int, value: bytes) -> bytes:
        if not 0 <= slot < len(self.slots):
            raise IndexError(f"REM slot {slot} does not exist")
        self.slots[slot] = hashlib.sha256(self.slots[slot] + value).digest()
        return self.slots[slot]

    def as_tuple(self) -> Tuple[bytes, ...]:
        return tuple(self.slots)
