# tzcvm_sim/tmm_core/config.py

from __future__ import annotations

import logging

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

# ─── Architectural constants ─────────────────────────────────────────────────
TTT_LEVELS = 4
BITS_PER_LEVEL = 9
ENTRIES_PER_TABLE = 1 << BITS_PER_LEVEL
BLOCK_LEVELS = {1: 1 << 30, 2: 1 << 21}    # level -> block size in bytes
REM_SLOTS = 4
MMIO_WINDOW = 64 << 20                      # top of the IPA space reserved for emulated devices
MIN_IPA_WIDTH = 32
MAX_IPA_WIDTH = 48
FEATURE_REGISTER_VALID = 0x0000_0000_FFFF_FFFF   # upper half is reserved (reads as zero)

# GIC distributor frame at the bottom of the MMIO window
GICD_OFFSET = 0x0
GICD_SGIR = 0xF00


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    """
    Monitor tunables.
    """
    platform_features: int = Field(0x1101_1121, ge=0, description="Feature bits the platform implements")
    default_run_budget: int = Field(1000, ge=1, description="Ticks granted per tec_enter when unspecified")
    max_cvms: int = Field(64, ge=1)
    max_tecs_per_cvm: int = Field(16, ge=1)
    list_registers: int = Field(4, ge=1, le=4)

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_TMM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )

    @model_validator(mode="after")
    def _features_architectural(self) -> "Settings":
        if self.platform_features & ~FEATURE_REGISTER_VALID:
            raise ValueError("platform_features sets reserved bits")
        return self


settings = Settings()
