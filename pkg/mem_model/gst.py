# tzcvm_sim/mem_model/gst.py
"""
Granule status table for the delegation-based (dynamic) policy.
"""
from __future__ import annotations

from enum import Enum
from typing import Dict, Iterator, Optional

from .errors import WrongState


class DelegationStatus(str, Enum):
    UNDELEGATED = "Undelegated"
    DELEGATED = "Delegated"
    ASSIGNED = "Assigned"


# Permitted edges only; anything else is a WrongState.
_EDGES = {
    (DelegationStatus.UNDELEGATED, DelegationStatus.DELEGATED),
    (DelegationStatus.DELEGATED, DelegationStatus.ASSIGNED),
    (DelegationStatus.ASSIGNED, DelegationStatus.DELEGATED),
    (DelegationStatus.DELEGATED, DelegationStatus.UNDELEGATED),
}


class GranuleStatusTable:
    def __init__(self, granules: int):
        self._status: Dict[int, DelegationStatus] = {
            i: DelegationStatus.UNDELEGATED for i in range(granules)
        }

    def status(self, index: int) -> DelegationStatus:
        return self._status[index]

    def transition(self, index: int, target: DelegationStatus) -> None:
        current = self._status[index]
        if (current, target) not in _EDGES:
            raise WrongState(f"granule {index}: {current.value} -> {target.value} not permitted")
        self._status[index] = target

    def lowest(self, status: DelegationStatus) -> Optional[int]:
        return next((i for i, s in self._status.items() if s is status), None)

    def __iter__(self) -> Iterator[int]:
        return iter(self._status)
