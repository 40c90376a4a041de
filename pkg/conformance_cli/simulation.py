# tzcvm_sim/conformance_cli/simulation.py
"""
One simulated platform: memory, interrupt controller, RoT, monitor and host,
wired together the same way for scenario runs, conformance cases and replay.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from attestation.keys import Platform
from host_sim.config import HostPolicy
from host_sim.gic import GicState
from host_sim.host import Host
from mem_model.granules import MappingPolicy, TzascConfig
from mem_model.memory import PhysicalMemory
from tmm_core.config import settings as tmm_settings
from tmm_core.monitor import Monitor
from tmm_core.trace import TraceWriter

logger = logging.getLogger(__name__)


def rot_seed_for(seed: int) -> bytes:
    """Platform RoT seed derived from a scenario seed."""
    return hashlib.sha256(b"tzcvm-sim scenario seed" + seed.to_bytes(8, "little")).digest()


@dataclass
class Simulation:
    memory: PhysicalMemory
    gic: GicState
    platform: Platform
    monitor: Monitor
    host: Host
    trace: Optional[TraceWriter] = None

    @classmethod
    def build(
        cls,
        policy: MappingPolicy = MappingPolicy.DIRECT,
        granules: Optional[int] = None,
        tzasc: Optional[TzascConfig] = None,
        seed: int = 0,
        platform: Optional[Platform] = None,
        host_policy: Optional[HostPolicy] = None,
        trace: Optional[TraceWriter] = None,
        features: Optional[int] = None,
        blk_dir: Optional[Path] = None,
    ) -> "Simulation":
        policy = MappingPolicy(policy)
        memory = PhysicalMemory(granules, policy, tzasc=tzasc)
        gic = GicState(tmm_settings.list_registers)
        platform = platform or Platform(rot_seed=rot_seed_for(seed))
        monitor = Monitor(memory, platform, gic, trace, features)
        if host_policy is None:
            host_policy = HostPolicy(mapping_policy=policy)
        host = Host(monitor, host_policy, blk_dir)
        logger.debug("Simulation built: %d granules, %s policy, seed %d", len(memory), policy.value, seed)
        return cls(memory, gic, platform, monitor, host, trace)


def token_from_trace(trace: Sequence[dict]) -> bytes:
    """Reassemble the attestation token a vCPU pulled chunk by chunk."""
    return b"".join(
        bytes.fromhex(e["data"]) for e in trace
        if e.get("tsi") == "attestation_token_continue" and "data" in e
    )
