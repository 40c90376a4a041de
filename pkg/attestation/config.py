# tzcvm_sim/attestation/config.py

from __future__ import annotations

import hashlib
import logging

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

CHALLENGE_SIZE = 64
TOKEN_MAGIC = b"TZAT"
TOKEN_VERSION = 1
SEAL_MAGIC = b"TZSB"

# Domain-separation labels for the derivation tree.
LABEL_STORAGE = b"storage"
LABEL_ATTEST = b"attest"
LABEL_AIK = b"aik"
LABEL_BOOT = b"boot"
LABEL_SEAL = b"seal"
LABEL_SEAL_NONCE = b"seal-nonce"
LABEL_IO = b"io"


# ───────────────────────── Settings ──────────────────────────────────────────
class Settings(BaseSettings):
    """
    Root-of-trust inputs of the simulated platform (hex strings).
    """
    rot_seed: str = Field(hashlib.sha256(b"tzcvm-sim rot seed").hexdigest(), description="32-byte RoT seed")
    firmware_digest: str = Field(hashlib.sha256(b"tzcvm-sim firmware 1.0").hexdigest(),
                                 description="Digest of the measured monitor firmware")
    platform_info: str = Field("tzcvm-sim/armv8.4-a", description="Free-form platform description carried in tokens")

    model_config = SettingsConfigDict(
        env_prefix="TZCVM_ATTEST_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
    )

    @field_validator("rot_seed", "firmware_digest")
    @classmethod
    def _hex32(cls, v: str) -> str:
        try:
            raw = bytes.fromhex(v)
        except ValueError as exc:
            raise ValueError("expected a hex string") from exc
        if len(raw) != 32:
            raise ValueError(f"expected 32 bytes, got {len(raw)}")
        return v.lower()

    @property
    def seed_bytes(self) -> bytes:
        return bytes.fromhex(self.rot_seed)

    @property
    def firmware_bytes(self) -> bytes:
        return bytes.fromhex(self.firmware_digest)


settings = Settings()
