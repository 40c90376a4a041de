# tzcvm_sim/attestation/sealing.py
"""
Policy-bound sealed storage.

A blob can only be opened on the same platform running the firmware named in
its policy and, when the policy binds one, by a cVM with the named initial
measurement. The AES-256-GCM key is derived from the root storage key and
the policy encoding, which is also the associated data. Nonces come from HKDF
over a per-platform seal counter, so a seeded run reseals byte for byte.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .config import LABEL_SEAL, LABEL_SEAL_NONCE, SEAL_MAGIC
from .errors import NotActive, SealPolicyMismatch, TagFailure, TokenFormatError
from .keys import hkdf, pack_fields, unpack_fields

if TYPE_CHECKING:
    from tmm_core.cvm import CVmDescriptor
    from tmm_core.monitor import Monitor

logger = logging.getLogger(__name__)

NONCE_SIZE = 12


@dataclass(frozen=True)
class SealPolicy:
    required_firmware_digest: bytes
    required_measurement: Optional[bytes] = None

    def encode(self) -> bytes:
        bound = self.required_measurement is not None
        return struct.pack("<4sB", b"TZSP", int(bound)) + self.required_firmware_digest + (
            self.required_measurement if bound else bytes(32)
        )

    @classmethod
    def decode(cls, raw: bytes) -> "SealPolicy":
        if len(raw) != 69 or raw[:4] != b"TZSP" or raw[4] not in (0, 1):
            raise TokenFormatError("malformed seal policy")
        return cls(raw[5:37], raw[37:69] if raw[4] else None)


@dataclass(frozen=True)
class SealedBlob:
    policy: SealPolicy
    nonce: bytes
    ciphertext: bytes           # includes the 16-byte GCM tag

    @property
    def auth_tag(self) -> bytes:
        return self.ciphertext[-16:]

    def encode(self) -> bytes:
        return SEAL_MAGIC + pack_fields(self.policy.encode(), self.nonce, self.ciphertext)

    @classmethod
    def decode(cls, raw: bytes) -> "SealedBlob":
        if raw[:4] != SEAL_MAGIC:
            raise TokenFormatError("not a sealed blob")
        (policy, nonce, ciphertext), end = unpack_fields(raw, 3, 4)
        if end != len(raw) or len(nonce) != NONCE_SIZE:
            raise TokenFormatError("malformed sealed blob")
        return cls(SealPolicy.decode(policy), nonce, ciphertext)


def _active(monitor: "Monitor", cvm_id: int) -> "CVmDescriptor":
    from tmm_core.types import CVmState

    cvm = monitor.cvms.get(cvm_id)
    if cvm is None or cvm.state is not CVmState.ACTIVE:
        raise NotActive(f"cVM {cvm_id} is not ACTIVE")
    return cvm


def _key(monitor: "Monitor", policy: SealPolicy) -> bytes:
    return hkdf(monitor.platform.keys.root_storage_key, b"", LABEL_SEAL + policy.encode())


def _nonce(monitor: "Monitor", policy: SealPolicy, plaintext: bytes) -> bytes:
    """Derived from the platform seal counter and the plaintext; a rerun with the same seed repeats it."""
    platform = monitor.platform
    platform.seal_count += 1
    info = LABEL_SEAL_NONCE + policy.encode() + struct.pack("<QQ", platform.boot_count, platform.seal_count)
    return hkdf(platform.keys.root_storage_key, b"", info + hashlib.sha256(plaintext).digest(), NONCE_SIZE)


def current_policy(monitor: "Monitor", cvm_id: int, bind_measurement: bool = True) -> SealPolicy:
    cvm = _active(monitor, cvm_id)
    return SealPolicy(monitor.platform.firmware_digest, cvm.initial_measurement if bind_measurement else None)


def seal(monitor: "Monitor", cvm_id: int, plaintext: bytes, policy: Optional[SealPolicy] = None) -> SealedBlob:
    _active(monitor, cvm_id)
    policy = policy or current_policy(monitor, cvm_id)
    nonce = _nonce(monitor, policy, plaintext)
    ciphertext = AESGCM(_key(monitor, policy)).encrypt(nonce, plaintext, policy.encode())
    return SealedBlob(policy, nonce, ciphertext)


def unseal(monitor: "Monitor", cvm_id: int, blob: SealedBlob) -> bytes:
    cvm = _active(monitor, cvm_id)
    policy = blob.policy
    if policy.required_firmware_digest != monitor.platform.firmware_digest:
        raise SealPolicyMismatch("blob is bound to a different firmware version")
    if policy.required_measurement is not None and policy.required_measurement != cvm.initial_measurement:
        raise SealPolicyMismatch(f"blob is bound to a different cVM measurement than cVM {cvm_id}'s")
    try:
        return AESGCM(_key(monitor, policy)).decrypt(blob.nonce, blob.ciphertext, policy.encode())
    except InvalidTag as exc:
        logger.warning("Sealed blob for cVM %d failed authentication", cvm_id)
        raise TagFailure("sealed blob failed authentication") from exc
