# tzcvm_sim/shadow_sync/config.py

from __future__ import annotations

import logging
from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

# ─── Reference measurements ──────────────────────────────────────────────────
# (size bytes, direct µs, dynamic µs) host→cVM memcpy
REFERENCE_MEMCPY: Tuple[Tuple[int, float, float], ...] = (
    (64, 0.9, 2.5),
    (256, 1.6, 3.1),
    (512, 3.2, 4.7),
    (4096, 12.9, 14.5),
)

# Hypercall round trip, one entry per step in order ① … ⑨ (µs)
HVC_STEPS: Tuple[Tuple[str, float], ...] = (
    ("trap cVM S-EL1 -> TMM S-EL2", 4.0),
    ("TMM -> firmware world switch", 27.0),
    ("save cVM context, restore NS context", 30.0),
    ("ERET to host EL2", 4.0),
    ("host TMI call traps to firmware", 23.0),
    ("save NS context, restore cVM context", 30.0),
    ("ERET to TMM S-EL2", 4.0),
    ("copy TEC general purpose registers", 30.0),
    ("ERET to cVM S-EL1", 4.0),
)
HVC_RESIDUAL_US = 94.0       # timer state, error checking
LR_WRITE_US = 1.0            # host list-register write during interrupt emulation

# Reference platform figures (µs): (vanilla KVM, confidential VM)
REFERENCE_MICRO: Dict[str, Tuple[float, float]] = {
    "hvc": (35.0, 250.0),
    "ipi": (122.0, 314.0),
    "io": (1118.0, 2612.0),
}


# ─── Latency constants ───────────────────────────────────────────────────────
class LatencyConstants(BaseModel):
    """Per-event simulated costs in µs; counters × constants gives run latency."""
    model_config = ConfigDict(extra="forbid")

    world_switch: float = Field(148.0, ge=0.0)
    tlb_flush: float = Field(0.0, ge=0.0)
    stage2_map: float = Field(0.0, ge=0.0)
    stage2_unmap: float = Field(0.0, ge=0.0)
    tmi_calls: float = Field(0.0, ge=0.0)
    smc_calls: float = Field(0.0, ge=0.0)
    interrupt_emulation: float = Field(0.0, ge=0.0)
    lr_writes: float = Field(LR_WRITE_US, ge=0.0)
    io_device_model: float = Field(1083.0, ge=0.0, description="host virtio-net device model work per request")

    def per_event(self) -> Dict[str, float]:
        return {
            name: getattr(self, name)
            for name in (
                "world_switch", "tlb_flush", "stage2_map", "stage2_unmap",
                "tmi_calls", "smc_calls", "interrupt_emulation", "lr_writes",
            )
        }

    def with_dynamic_overhead(self, overhead_us: float) -> "LatencyConstants":
        """Spread one dynamic-mapping overhead evenly over map, unmap and flush."""
        share = overhead_us / 3.0
        return self.model_copy(update={"stage2_map": share, "stage2_unmap": share, "tlb_flush": share})


class CalibrationSample(BaseModel):
    size: int = Field(..., gt=0)
    direct_us: float = Field(..., ge=0.0)
    dynamic_us: float = Field(..., ge=0.0)

    @field_validator("dynamic_us")
    @classmethod
    def _finite(cls, v: float) -> float:
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("latency must be finite")
        return v


def reference_samples() -> List[CalibrationSample]:
    return [CalibrationSample(size=s, direct_us=d, dynamic_us=y) for s, d, y in REFERENCE_MEMCPY]


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    calibrate_on_start: bool = Field(True, description="fit the memcpy model from the reference table")
    io_vring_pages: int = Field(4, ge=1, description="vring pages synchronized per virtio request")

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_COST_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )


settings = Settings()
