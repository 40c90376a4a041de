# tzcvm_sim/host_sim/gic.py
"""
Interrupt controller model shared by the host and the monitor.

Physical interrupts are banked per target CPU (one CPU per TEC). The
monitor only ever looks at whether a Group-1 interrupt is pending for the
CPU it is running on; acknowledging and injecting is the host's job.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from tmm_core.types import ListRegister, LrState, pack_list_registers, unpack_list_registers

from .errors import NoFreeListRegister

logger = logging.getLogger(__name__)

AssertObserver = Callable[[str, int, int], None]


class Group(str, Enum):
    G0_SECURE = "G0"
    G1_NONSECURE = "G1"


@dataclass
class InterruptLine:
    intid: int
    target: int
    group: Group = Group.G1_NONSECURE
    enabled: bool = True
    pending: bool = False


class GicState:
    def __init__(self, list_registers: int = 4):
        self.lr_count = list_registers
        self._lines: Dict[Tuple[int, int], InterruptLine] = {}
        self._lrs: Dict[int, List[Optional[ListRegister]]] = {}
        self._lock = threading.Lock()
        self.observer: Optional[AssertObserver] = None
        self.lr_writes = 0

    # ── Physical side ───────────────────────────────────────────────────────
    def configure(self, intid: int, target: int, group: Group = Group.G1_NONSECURE, enabled: bool = True) -> None:
        with self._lock:
            line = self._lines.setdefault((intid, target), InterruptLine(intid, target))
            line.group = group
            line.enabled = enabled

    def assert_interrupt(self, intid: int, target: int) -> None:
        with self._lock:
            line = self._lines.setdefault((intid, target), InterruptLine(intid, target))
            line.pending = True
        logger.debug("Physical interrupt %d asserted for CPU %d", intid, target)
        if self.observer is not None:
            self.observer("irq_assert", intid, target)

    def pending_for(self, target: int) -> Optional[int]:
        """Lowest pending, enabled, non-secure interrupt routed to `target`."""
        with self._lock:
            ready = [
                line.intid for line in self._lines.values()
                if line.target == target and line.pending and line.enabled and line.group is Group.G1_NONSECURE
            ]
        return min(ready) if ready else None

    def acknowledge(self, target: int) -> Optional[int]:
        intid = self.pending_for(target)
        if intid is None:
            return None
        with self._lock:
            self._lines[(intid, target)].pending = False
        if self.observer is not None:
            self.observer("irq_ack", intid, target)
        return intid

    # ── Virtual side (list registers, written by the host) ──────────────────
    def _bank(self, tec_id: int) -> List[Optional[ListRegister]]:
        # caller holds _lock
        return self._lrs.setdefault(tec_id, [None] * self.lr_count)

    def list_registers(self, tec_id: int) -> List[Optional[ListRegister]]:
        with self._lock:
            return list(self._bank(tec_id))

    def write_lr(self, tec_id: int, intid: int) -> int:
        with self._lock:
            lrs = self._bank(tec_id)
            for slot, lr in enumerate(lrs):
                if lr is None:
                    lrs[slot] = ListRegister(intid, LrState.PENDING)
                    self.lr_writes += 1
                    return slot
        raise NoFreeListRegister(f"all {self.lr_count} list registers of TEC {tec_id} are in use")

    def lr_word(self, tec_id: int) -> int:
        return pack_list_registers(self.list_registers(tec_id))

    def sync_from_word(self, tec_id: int, word: int) -> None:
        """Adopt the list-register state the monitor handed back on exit."""
        lrs = unpack_list_registers(word, self.lr_count)
        with self._lock:
            self._lrs[tec_id] = lrs

    def forget(self, tec_id: int) -> None:
        with self._lock:
            self._lrs.pop(tec_id, None)
            for key in [k for k in self._lines if k[1] == tec_id]:
                del self._lines[key]


# ─── Distributor SGI register ────────────────────────────────────────────────
def sgir_value(targets: List[int], intid: int) -> int:
    """GICD_SGIR word: SGI number in bits [3:0], vCPU target list in bits [23:16]."""
    mask = 0
    for t in targets:
        mask |= 1 << t
    return (mask & 0xFF) << 16 | (intid & 0xF)


def decode_sgir(value: int) -> Tuple[int, List[int]]:
    mask = (value >> 16) & 0xFF
    return value & 0xF, [cpu for cpu in range(8) if mask >> cpu & 1]
