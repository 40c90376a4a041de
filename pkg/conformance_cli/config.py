# tzcvm_sim/conformance_cli/config.py

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

CATEGORIES = (
    "multi-core",
    "race",
    "input-sanity",
    "ttt-levels",
    "inter-world-sharing",
    "inter-cvm-isolation",
    "timer-interrupt",
)
BENCHES = ("hvc", "ipi", "io", "memcpy")
REPORT_VERSION = 1


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    """
    Command-line defaults.
    """
    report_path: Path = Field(Path("reports/report.json"), description="Where the JSON report is written")
    trace_path: Optional[Path] = Field(None, description="JSON-lines TMI trace (none unless set)")
    work_dir: Path = Field(Path("reports/work"), description="Scratch space for blk images of cases")
    parallel_cpus: int = Field(1, ge=1, le=8, description="Simulated CPUs; race cases need at least two")
    seed: int = Field(0, ge=0)
    case_timeout_s: float = Field(30.0, gt=0.0)

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_CLI_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )


settings = Settings()
