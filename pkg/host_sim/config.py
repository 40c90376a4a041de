# tzcvm_sim/host_sim/config.py

from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import FrozenSet

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from mem_model.granules import MappingPolicy

logger = logging.getLogger(__name__)

# ─── Platform interrupt numbering ────────────────────────────────────────────
IPI_SGI = 1                  # SGI guests use for inter-processor interrupts
TIMER_INTID = 27             # virtual timer PPI
BLK_INTID = 48
NET_INTID = 49


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    """
    Untrusted host defaults.
    """
    quantum: int = Field(200, ge=1, description="Ticks per tec_enter under round-robin")
    max_steps: int = Field(10_000, ge=1, description="tec_enter budget of one run()")
    queue_size: int = Field(256, ge=2, le=1024, description="Virtqueue entries")
    io_data_pages: int = Field(8, ge=1, description="Bounce-buffer pages behind the rings")
    blk_image_dir: Path = Field(Path("blk_images"), description="Directory for file-backed blk images")
    blk_sectors: int = Field(2048, ge=8, description="Size of a fresh blk image in 512-byte sectors")
    io_retry_attempts: int = Field(3, ge=1)
    region_slack_pages: int = Field(16, ge=0, description="Extra secure granules reserved per cVM")

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_HOST_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )

    @field_validator("queue_size")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError("queue_size must be a power of two")
        return v


settings = Settings()


# ─── Host policy ─────────────────────────────────────────────────────────────
class InjectionMode(str, Enum):
    FAITHFUL = "faithful"
    DROP = "drop"


class HostPolicy(BaseModel):
    """How the (untrusted) host behaves. Nothing here may break a monitor invariant."""
    model_config = ConfigDict(extra="forbid")

    quantum: int = Field(default_factory=lambda: settings.quantum, ge=1)
    mapping_policy: MappingPolicy = MappingPolicy.DIRECT
    injection: InjectionMode = InjectionMode.FAITHFUL
    drop_intids: FrozenSet[int] = frozenset()
    fault_in_protected: bool = Field(True, description="Back unmapped protected faults with zeroed pages")

    def injects(self, intid: int) -> bool:
        return self.injection is InjectionMode.FAITHFUL or intid not in self.drop_intids
