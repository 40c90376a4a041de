# tzcvm_sim/conformance_cli/bench.py
"""
Micro-benchmark tables: the calibrated latency model next to the reference
platform figures, one pandas DataFrame per bench.
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, Optional

import numpy as np
import pandas as pd

from host_sim import guest as g
from host_sim.config import IPI_SGI
from host_sim.gic import sgir_value
from mem_model.config import GRANULE_SIZE
from mem_model.granules import MappingPolicy
from shadow_sync.config import REFERENCE_MEMCPY, REFERENCE_MICRO
from shadow_sync.config import settings as cost_settings
from shadow_sync.cost_model import (
    MemcpyModel,
    current_model,
    interrupt_round_trip_us,
    simulate_hvc_latency,
    simulate_io_latency,
    simulate_ipi_latency,
    simulate_memcpy_latency,
)
from tmm_core.config import GICD_OFFSET, GICD_SGIR
from tmm_core.types import CVmParams, TecParams

from .errors import ScenarioError
from .simulation import Simulation

logger = logging.getLogger(__name__)

TOLERANCE_PCT = 10.0


def _error_pct(model: float, reference: float) -> float:
    return float(abs(model - reference) / reference * 100.0) if reference else float("nan")


def _micro_row(name: str, model_us: float, **extra: object) -> Dict[str, object]:
    vanilla, reference = REFERENCE_MICRO[name]
    return {
        "bench": name,
        "model_us": round(model_us, 3),
        "reference_us": reference,
        "vanilla_us": vanilla,
        "error_pct": round(_error_pct(model_us, reference), 3),
        "slowdown_x": round(model_us / vanilla, 3),
        **extra,
    }


# ─── Benches ─────────────────────────────────────────────────────────────────
def bench_hvc() -> pd.DataFrame:
    """Per-step decomposition of one hypercall round trip plus the total."""
    breakdown = simulate_hvc_latency()
    steps = pd.DataFrame(breakdown.as_rows())
    steps["bench"] = "hvc"
    total = pd.DataFrame([_micro_row("hvc", breakdown.total, step="total",
                                     description=f"round trip {breakdown.round_trip:.0f} µs")])
    return pd.concat([steps, total], ignore_index=True)


def count_ipi_round_trips(seed: int = 0) -> int:
    """Interrupt-emulation round trips a simulated virtual IPI costs end to end."""
    sim = Simulation.build(seed=seed)
    sgir = CVmParams().mmio_base + GICD_OFFSET + GICD_SGIR
    sender = TecParams(program=g.GuestProgram.of(
        g.PsciCall(function="cpu_on", target=1),
        g.ComputeTicks(ticks=10),
        g.MmioWrite(ipa=sgir, value=sgir_value([1], IPI_SGI)),
        g.Wfi(),
    ))
    receiver = TecParams(program=g.GuestProgram.of(g.Wfi(), g.PsciCall(function="system_off")))
    cvm = sim.host.boot_cvm([(0, b"ipi")], CVmParams(vcpu_count=2), [sender, receiver])
    report = sim.host.run(cvm)
    if not report.destroyed:
        raise ScenarioError(f"IPI bench guest did not finish: {report.exits}")
    return report.counters["interrupt_emulation"]


def bench_ipi(seed: int = 0) -> pd.DataFrame:
    trips = count_ipi_round_trips(seed)
    return pd.DataFrame([_micro_row(
        "ipi", simulate_ipi_latency(trips),
        round_trips=trips, round_trip_us=interrupt_round_trip_us(),
    )])


def bench_io(model: Optional[MemcpyModel] = None) -> pd.DataFrame:
    """One virtio request: hypercall, vring sync out and back, host device model."""
    vring = cost_settings.io_vring_pages * GRANULE_SIZE
    rows = []
    for policy in (MappingPolicy.DIRECT, MappingPolicy.DYNAMIC):
        row = _micro_row("io", simulate_io_latency(vring, policy, model=model),
                         policy=policy.value, vring_bytes=vring)
        rows.append(row)
    return pd.DataFrame(rows)


def bench_memcpy(model: Optional[MemcpyModel] = None) -> pd.DataFrame:
    """The eight calibrated copy cells, with the dynamic/direct slowdown per size."""
    model = model or current_model()
    rows = []
    for size, direct_ref, dynamic_ref in REFERENCE_MEMCPY:
        for policy, reference in ((MappingPolicy.DIRECT, direct_ref), (MappingPolicy.DYNAMIC, dynamic_ref)):
            value = simulate_memcpy_latency(size, policy, model)
            rows.append({
                "size": size,
                "policy": policy.value,
                "model_us": round(value, 3),
                "reference_us": reference,
                "error_pct": round(_error_pct(value, reference), 3),
            })
    table = pd.DataFrame(rows)
    wide = table.pivot(index="size", columns="policy", values="model_us")
    slowdown = (wide[MappingPolicy.DYNAMIC.value] / wide[MappingPolicy.DIRECT.value] - 1.0) * 100.0
    table["dynamic_slowdown_pct"] = table["size"].map(slowdown.round(1))
    table["within_tolerance"] = table["error_pct"] <= TOLERANCE_PCT
    logger.info("memcpy model: worst cell error %.2f%%, dynamic slowdown %.0f%%..%.0f%%",
                table["error_pct"].max(), float(np.min(slowdown)), float(np.max(slowdown)))
    return table


BENCH_RUNNERS: Dict[str, Callable[[], pd.DataFrame]] = {
    "hvc": bench_hvc,
    "ipi": bench_ipi,
    "io": bench_io,
    "memcpy": bench_memcpy,
}


def bench_table(name: str) -> pd.DataFrame:
    runner = BENCH_RUNNERS.get(name)
    if runner is None:
        raise ScenarioError(f"unknown bench {name!r}; choose from {sorted(BENCH_RUNNERS)}")
    return runner()
