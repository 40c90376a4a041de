# tzcvm_sim/conformance_cli/replay.py
"""
Oracle replay: rebuild a fresh monitor from a trace's config record, re-issue
every recorded host action in order and compare the TMI response streams.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from attestation.keys import Platform
from host_sim.gic import GicState
from mem_model.granules import MappingPolicy, Requestor, TzascConfig
from mem_model.memory import PhysicalMemory
from shadow_sync.sync import Direction
from tmm_core.monitor import Monitor
from tmm_core.trace import TraceWriter, load_trace
from tmm_core.types import TmiCommand, TmiRequest

from .errors import ScenarioError

logger = logging.getLogger(__name__)

_HOST = Requestor.host()


@dataclass
class ReplayResult:
    records: int = 0
    commands: int = 0
    mismatches: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def identical(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> Dict[str, Any]:
        return {
            "records": self.records,
            "commands": self.commands,
            "identical": self.identical,
            "mismatches": self.mismatches[:10],
        }


def _command_code(name: str) -> int:
    try:
        return int(TmiCommand[name])
    except KeyError:
        return int(name, 16)


def monitor_from_config(header: Dict[str, Any], trace: Optional[TraceWriter] = None) -> Monitor:
    """A platform identical to the one described by a trace's config record."""
    memory = PhysicalMemory(
        header["granules"],
        MappingPolicy(header["policy"]),
        tzasc=TzascConfig.from_entries(header["tzasc"]),
    )
    gic = GicState(header["list_registers"])
    p = header["platform"]
    platform = Platform(
        rot_seed=bytes.fromhex(p["rot_seed"]),
        firmware_digest=bytes.fromhex(p["firmware_digest"]),
        platform_info=p["platform_info"],
    )
    while platform.boot_count < p["boot_count"]:
        platform.power_cycle()
    return Monitor(memory, platform, gic, trace, header["features"])


def replay_trace(source: Union[str, Path, Sequence[Dict[str, Any]]]) -> ReplayResult:
    """Feed a recorded trace through a fresh monitor; every response must match."""
    records = load_trace(source) if isinstance(source, (str, Path)) else list(source)
    if not records or records[0].get("event") != "config":
        raise ScenarioError("trace does not start with a config record")
    oracle = TraceWriter()
    monitor = monitor_from_config(records[0], oracle)
    expected = [r for r in records if r["event"] == "tmi"]
    result = ReplayResult(records=len(records), commands=len(expected))

    for r in records[1:]:
        kind = r["event"]
        if kind == "tmi":
            monitor.dispatch(TmiRequest(_command_code(r["command"]), tuple(r["args"])), r.get("cpu", 0))
        elif kind == "host_write":
            monitor.memory.write(_HOST, r["granule"], bytes.fromhex(r["data"]), r["offset"])
        elif kind == "irq_assert":
            monitor.gic.assert_interrupt(r["intid"], r["target"])
        elif kind == "irq_ack":
            monitor.gic.acknowledge(r["target"])
        elif kind in ("delegate", "undelegate"):
            getattr(monitor, kind)(r["granule"])
        elif kind == "register_io":
            monitor.register_io(r["cvm"], r["ipa_base"], r["pages"], r["queue_size"], r.get("shadow_base"))
        elif kind == "protect_io":
            monitor.protect_io_pages(r["cvm"], r["ipas"])
        elif kind == "io_tags":
            monitor.store_io_tags(r["cvm"], {int(page): bytes.fromhex(tag) for page, tag in r["tags"].items()})
        elif kind == "sync":
            monitor.sync_io(r["cvm"], Direction(r["direction"]), r["offset"], r["size"])
        # "state" records are consequences of TMIs, not inputs

    replayed = oracle.responses()
    recorded = [{k: r[k] for k in ("command", "status", "results", "exit") if k in r} for r in expected]
    for i, (want, got) in enumerate(zip(recorded, replayed)):
        if want != got:
            result.mismatches.append({"index": i, "recorded": want, "replayed": got})
    if len(recorded) != len(replayed):
        result.mismatches.append({"index": min(len(recorded), len(replayed)), "recorded_count": len(recorded),
                                  "replayed_count": len(replayed)})
    logger.info("Replayed %d TMI(s): %s", result.commands,
                "identical" if result.identical else f"{len(result.mismatches)} mismatch(es)")
    return result
