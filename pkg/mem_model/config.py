# tzcvm_sim/mem_model/config.py

from __future__ import annotations

import logging

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

GRANULE_SIZE = 4096          # bytes per granule (4 KiB frame)
MAX_TZASC_REGIONS = 8        # TZC-400 style controller limit


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    """
    Physical memory defaults. Scenario files override these per run.
    """
    granules: int = Field(4096, ge=16, description="Physical memory size in granules")
    secure_granules: int = Field(1024, ge=0, description="Default secure region size")
    policy: str = Field("direct", pattern="^(direct|dynamic)$")
    audit_limit: int = Field(10_000, ge=1, description="Most recent host accesses kept in the audit ring")

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_MEM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )


settings = Settings()
