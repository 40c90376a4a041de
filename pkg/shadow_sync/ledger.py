# tzcvm_sim/shadow_sync/ledger.py

from __future__ import annotations

import logging
import threading
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

if TYPE_CHECKING:
    from .config import LatencyConstants
    from .cost_model import MemcpyModel

logger = logging.getLogger(__name__)

# ─── Counter catalogue ───────────────────────────────────────────────────────
COUNTERS: Tuple[str, ...] = (
    "world_switch",          # full normal↔secure round trips
    "tlb_flush",
    "stage2_map",
    "stage2_unmap",
    "tmi_calls",
    "smc_calls",             # TMIs plus delegation calls
    "bytes_copied",
    "interrupt_emulation",   # interrupt-related exit round trips
    "fiq_taken",
    "lr_writes",
    "host_calls",
    "sync_transfers",
    "integrity_failures",
)


class CostLedger:
    """
    Monotone event counters for one simulated platform.

    Counters are only ever increased; `snapshot()` returns a consistent copy
    taken under the same lock that guards updates.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counters: Dict[str, int] = {name: 0 for name in COUNTERS}
        self._transfer_sizes: List[int] = []

    def record(self, counter: str, amount: int = 1) -> None:
        if counter not in self._counters:
            raise KeyError(f"unknown ledger counter {counter!r}")
        if amount < 0:
            raise ValueError("ledger counters are monotone")
        with self._lock:
            self._counters[counter] += amount

    def record_many(self, **amounts: int) -> None:
        with self._lock:
            for counter, amount in amounts.items():
                if counter not in self._counters:
                    raise KeyError(f"unknown ledger counter {counter!r}")
                if amount < 0:
                    raise ValueError("ledger counters are monotone")
            for counter, amount in amounts.items():
                self._counters[counter] += amount

    def record_transfer(self, size: int, **extra: int) -> None:
        """Account one copy of `size` bytes together with its mapping events."""
        with self._lock:
            self._transfer_sizes.append(size)
            self._counters["bytes_copied"] += size
            self._counters["sync_transfers"] += 1
            for counter, amount in extra.items():
                self._counters[counter] += amount

    def __getitem__(self, counter: str) -> int:
        with self._lock:
            return self._counters[counter]

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counters)

    def transfer_sizes(self) -> List[int]:
        with self._lock:
            return list(self._transfer_sizes)

    def delta(self, before: Dict[str, int]) -> Dict[str, int]:
        now = self.snapshot()
        return {k: now[k] - before.get(k, 0) for k in now}

    def simulated_latency(self, constants: "LatencyConstants", copy_model: Optional["MemcpyModel"] = None) -> float:
        """Σ counter × constant + Σ per-transfer copy cost, in µs."""
        snap = self.snapshot()
        total = sum(snap[name] * cost for name, cost in constants.per_event().items())
        if copy_model is not None:
            total += sum(copy_model.copy_cost(size) for size in self.transfer_sizes())
        return total

