# tzcvm_sim/attestation/keys.py
"""
Key hierarchy rooted in the platform RoT.

    root storage key      = HKDF(salt=firmware, ikm=seed, info="storage")
    root attestation key  = Ed25519(HKDF(salt=firmware, ikm=seed, info="attest"))
    AIK (per boot)        = Ed25519(HKDF(salt=firmware, ikm=seed, info="aik" ‖ boot nonce))

Both roots depend only on (seed, firmware); the AIK changes on every power
cycle and is certified by the root attestation key.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .config import LABEL_AIK, LABEL_ATTEST, LABEL_BOOT, LABEL_IO, LABEL_STORAGE, settings
from .errors import TokenFormatError

logger = logging.getLogger(__name__)

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64


def hkdf(ikm: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# ─── Length-prefixed fields ──────────────────────────────────────────────────
def pack_fields(*fields: bytes) -> bytes:
    return b"".join(struct.pack("<I", len(f)) + f for f in fields)


def unpack_fields(raw: bytes, count: int, offset: int = 0) -> Tuple[Tuple[bytes, ...], int]:
    """Read exactly `count` u32-length-prefixed fields starting at `offset`."""
    out = []
    for _ in range(count):
        if offset + 4 > len(raw):
            raise TokenFormatError("truncated length prefix")
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + length > len(raw):
            raise TokenFormatError("field runs past the end of the buffer")
        out.append(raw[offset:offset + length])
        offset += length
    return tuple(out), offset


# ─── Certificates ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Certificate:
    subject_public: bytes
    issuer_public: bytes
    claims: bytes
    signature: bytes

    def tbs(self) -> bytes:
        return pack_fields(self.subject_public, self.issuer_public, self.claims)

    def encode(self) -> bytes:
        return pack_fields(self.subject_public, self.issuer_public, self.claims, self.signature)

    @classmethod
    def decode(cls, raw: bytes) -> "Certificate":
        (subject, issuer, claims, signature), end = unpack_fields(raw, 4)
        if end != len(raw):
            raise TokenFormatError("trailing bytes after certificate")
        if len(subject) != PUBLIC_KEY_SIZE or len(issuer) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
            raise TokenFormatError("certificate field has the wrong size")
        return cls(subject, issuer, claims, signature)

    @classmethod
    def issue(cls, subject_public: bytes, issuer: Ed25519PrivateKey, claims: bytes) -> "Certificate":
        unsigned = cls(subject_public, raw_public(issuer), claims, b"")
        return cls(subject_public, unsigned.issuer_public, claims, issuer.sign(unsigned.tbs()))

    def verify(self, issuer_public: bytes) -> bool:
        return self.issuer_public == issuer_public and verify_signature(issuer_public, self.signature, self.tbs())


# ─── Hierarchy ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class KeyHierarchy:
    rot_seed: bytes
    firmware_digest: bytes
    boot_nonce: bytes
    root_storage_key: bytes = field(repr=False)
    root_attestation_key: Ed25519PrivateKey = field(repr=False)
    aik: Ed25519PrivateKey = field(repr=False)
    aik_cert: Certificate
    rak_cert: Certificate

    @property
    def rak_public(self) -> bytes:
        return self.rak_cert.subject_public

    @property
    def aik_public(self) -> bytes:
        return self.aik_cert.subject_public


def boot_nonce(rot_seed: bytes, firmware_digest: bytes, boot_count: int) -> bytes:
    """Deterministic stand-in for the fresh entropy a real power cycle provides."""
    return hkdf(rot_seed, firmware_digest, LABEL_BOOT + struct.pack("<I", boot_count), 16)


def derive_keys(rot_seed: bytes, firmware_digest: bytes, nonce: Optional[bytes] = None) -> KeyHierarchy:
    if len(rot_seed) != 32 or len(firmware_digest) != 32:
        raise ValueError("RoT seed and firmware digest must be 32 bytes each")
    nonce = nonce if nonce is not None else boot_nonce(rot_seed, firmware_digest, 0)
    storage = hkdf(rot_seed, firmware_digest, LABEL_STORAGE)
    rak = Ed25519PrivateKey.from_private_bytes(hkdf(rot_seed, firmware_digest, LABEL_ATTEST))
    aik = Ed25519PrivateKey.from_private_bytes(hkdf(rot_seed, firmware_digest, LABEL_AIK + nonce))
    rak_cert = Certificate.issue(raw_public(rak), rak, b"role=rak;fw=" + firmware_digest.hex().encode())
    aik_cert = Certificate.issue(raw_public(aik), rak, b"role=aik;boot=" + nonce.hex().encode())
    return KeyHierarchy(rot_seed, firmware_digest, nonce, storage, rak, aik, aik_cert, rak_cert)


class Platform:
    """The simulated SoC: RoT seed, installed firmware and the current boot's keys."""

    def __init__(self, rot_seed: Optional[bytes] = None, firmware_digest: Optional[bytes] = None,
                 platform_info: Optional[str] = None):
        self.rot_seed = rot_seed if rot_seed is not None else settings.seed_bytes
        self.firmware_digest = firmware_digest if firmware_digest is not None else settings.firmware_bytes
        self.platform_info = (platform_info or settings.platform_info).encode()
        self.boot_count = 0
        self.seal_count = 0
        self.keys = self._derive()

    def _derive(self) -> KeyHierarchy:
        return derive_keys(self.rot_seed, self.firmware_digest,
                           boot_nonce(self.rot_seed, self.firmware_digest, self.boot_count))

    def power_cycle(self) -> KeyHierarchy:
        self.boot_count += 1
        self.keys = self._derive()
        logger.info("Platform power cycle %d: new AIK %s", self.boot_count, self.keys.aik_public.hex()[:16])
        return self.keys

    def update_firmware(self, firmware_digest: bytes) -> KeyHierarchy:
        """Install new firmware; both roots are re-derived (TCB recovery)."""
        self.firmware_digest = firmware_digest
        self.keys = self._derive()
        logger.info("Firmware updated to %s; key hierarchy re-derived", firmware_digest.hex()[:16])
        return self.keys

    def io_key(self, measurement: bytes) -> bytes:
        """Per-cVM key for shadow page protection, bound to the cVM's measurement."""
        return hkdf(self.keys.root_storage_key, self.firmware_digest, LABEL_IO + measurement)

    def describe(self) -> dict:
        return {
            "rot_seed": self.rot_seed.hex(),
            "firmware_digest": self.firmware_digest.hex(),
            "boot_count": self.boot_count,
            "platform_info": self.platform_info.decode(),
        }
