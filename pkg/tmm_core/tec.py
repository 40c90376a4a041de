# tzcvm_sim/tmm_core/tec.py

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from host_sim.guest import GuestProgram

from .types import ListRegister, PsciFunction

GPR_COUNT = 31


class PendingKind(str, Enum):
    HOST_CALL = "host_call"
    MMIO_READ = "mmio_read"
    MMIO_WRITE = "mmio_write"


@dataclass(frozen=True)
class PendingPsci:
    function: PsciFunction
    target: int
    entry: int


@dataclass
class Tec:
    """Saved state of one virtual CPU. Lives in a granule in state Tec."""
    tec_id: int
    cvm_id: int
    index: int                      # vCPU number inside the cVM
    granule: int
    program: GuestProgram
    pc: int = 0
    runnable: bool = False
    gprs: List[int] = field(default_factory=lambda: [0] * GPR_COUNT)
    pending: Optional[PendingKind] = None
    pending_ipa: int = 0
    pending_psci: Optional[PendingPsci] = None
    ticks_left_in_instr: int = 0
    wake: bool = False              # a vIRQ arrived since the last Wfi
    list_registers: List[Optional[ListRegister]] = field(default_factory=lambda: [None] * 4)
    token_retrieval: Any = None     # tsi_services.services.TokenRetrieval
    trace: List[Dict[str, Any]] = field(default_factory=list)

    def reset_registers(self, x0_x7: Tuple[int, ...]) -> None:
        self.gprs = [0] * GPR_COUNT
        self.gprs[: len(x0_x7)] = list(x0_x7)

    def scrub(self) -> None:
        """Drop everything the host must never observe once the TEC is torn down."""
        self.gprs = [0] * GPR_COUNT
        self.trace.clear()
        self.token_retrieval = None
