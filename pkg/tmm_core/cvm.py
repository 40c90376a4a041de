# tzcvm_sim/tmm_core/cvm.py

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

from mem_model.granules import SecureRegion

from .errors import StateError
from .measurement import ExtensibleMeasurements, MeasurementState
from .ttt import Ttt
from .types import LIFECYCLE_EDGES, CVmParams, CVmState


@dataclass
class IoRegion:
    """Protected IPA run that is mirrored to the shadow for virtio."""
    ipa_base: int
    pages: int
    queue_size: int


@dataclass
class CVmDescriptor:
    cvm_id: int
    params: CVmParams
    descriptor_granule: int
    ttt: Ttt
    measurement: MeasurementState
    state: CVmState = CVmState.NEW
    region: Optional[SecureRegion] = None
    rem: ExtensibleMeasurements = field(default_factory=ExtensibleMeasurements)
    tecs: List[int] = field(default_factory=list)
    # Data granules unmapped by unmap_protected, keyed by the IPA they left
    detached: Dict[int, int] = field(default_factory=dict)
    shared: Set[int] = field(default_factory=set)
    io: Optional[IoRegion] = None
    driver_state: Dict[str, int] = field(default_factory=dict)   # guest-kernel virtio bookkeeping
    state_history: List[CVmState] = field(default_factory=lambda: [CVmState.NULL, CVmState.NEW])

    @property
    def initial_measurement(self) -> bytes:
        return self.measurement.current

    def move(self, target: CVmState) -> None:
        if (self.state, target) not in LIFECYCLE_EDGES:
            raise StateError(f"cVM {self.cvm_id} cannot go from {self.state.value} to {target.value}")
        self.state = target
        self.state_history.append(target)
