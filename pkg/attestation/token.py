# tzcvm_sim/attestation/token.py
"""
Attestation token: canonical encoding, construction and verification.

Layout:
    magic "TZAT" | version u16 | then u32-length-prefixed fields:
    challenge(64) measurement(32) rem0..rem3(32 each) config_digest(32)
    firmware_digest(32) platform_info aik_cert rak_cert signature(64)

The signature is made by the AIK over every byte before the signature field.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional, Tuple

from .config import CHALLENGE_SIZE, TOKEN_MAGIC, TOKEN_VERSION
from .errors import NotActive, TokenFormatError
from .keys import SIGNATURE_SIZE, Certificate, Platform, pack_fields, unpack_fields, verify_signature

if TYPE_CHECKING:
    from tmm_core.monitor import Monitor

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sH")
_DIGEST = 32


@dataclass(frozen=True)
class AttestationToken:
    challenge: bytes
    measurement: bytes
    rem: Tuple[bytes, bytes, bytes, bytes]
    config_digest: bytes
    firmware_digest: bytes
    platform_info: bytes
    aik_cert: Certificate
    rak_cert: Certificate
    signature: bytes = b""

    def tbs(self) -> bytes:
        return _HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION) + pack_fields(
            self.challenge, self.measurement, *self.rem, self.config_digest,
            self.firmware_digest, self.platform_info, self.aik_cert.encode(), self.rak_cert.encode(),
        )

    def encode(self) -> bytes:
        return self.tbs() + pack_fields(self.signature)

    @classmethod
    def decode(cls, raw: bytes) -> "AttestationToken":
        if len(raw) < _HEADER.size:
            raise TokenFormatError("token shorter than its header")
        magic, version = _HEADER.unpack_from(raw)
        if magic != TOKEN_MAGIC or version != TOKEN_VERSION:
            raise TokenFormatError(f"unsupported token header {magic!r} v{version}")
        fields, end = unpack_fields(raw, 12, _HEADER.size)
        if end != len(raw):
            raise TokenFormatError("trailing bytes after token")
        challenge, measurement, r0, r1, r2, r3, config, firmware, info, aik, rak, signature = fields
        if len(challenge) != CHALLENGE_SIZE:
            raise TokenFormatError("challenge must be 64 bytes")
        if any(len(d) != _DIGEST for d in (measurement, r0, r1, r2, r3, config, firmware)):
            raise TokenFormatError("digest field has the wrong size")
        if len(signature) != SIGNATURE_SIZE:
            raise TokenFormatError("signature has the wrong size")
        return cls(challenge, measurement, (r0, r1, r2, r3), config, firmware, info,
                   Certificate.decode(aik), Certificate.decode(rak), signature)


def sign_token(unsigned: AttestationToken, platform: Platform) -> AttestationToken:
    signature = platform.keys.aik.sign(unsigned.tbs())
    return replace(unsigned, signature=signature)


def build_token(monitor: "Monitor", cvm_id: int, challenge: bytes) -> AttestationToken:
    """Token for an ACTIVE cVM, signed by the current boot's AIK."""
    from tmm_core.types import CVmState

    cvm = monitor.cvms.get(cvm_id)
    if cvm is None or cvm.state is not CVmState.ACTIVE:
        raise NotActive(f"cVM {cvm_id} is not ACTIVE")
    if len(challenge) != CHALLENGE_SIZE:
        raise ValueError(f"challenge must be {CHALLENGE_SIZE} bytes")
    platform = monitor.platform
    unsigned = AttestationToken(
        challenge=bytes(challenge),
        measurement=cvm.initial_measurement,
        rem=tuple(cvm.rem.as_tuple()),
        config_digest=cvm.params.digest(),
        firmware_digest=platform.firmware_digest,
        platform_info=platform.platform_info,
        aik_cert=platform.keys.aik_cert,
        rak_cert=platform.keys.rak_cert,
    )
    return sign_token(unsigned, platform)


# ─── Verification ────────────────────────────────────────────────────────────
class RejectReason(str, Enum):
    FORMAT = "format"
    CHAIN = "chain"
    SIGNATURE = "signature"
    MEASUREMENT = "measurement-mismatch"
    CHALLENGE = "challenge-mismatch"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[RejectReason] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted

    @classmethod
    def reject(cls, reason: RejectReason, detail: str = "") -> "Verdict":
        return cls(False, reason, detail)


def verify_token(token: bytes, trusted_rak_public: bytes, expected_measurement: Optional[bytes] = None,
                 challenge: Optional[bytes] = None) -> Verdict:
    try:
        parsed = AttestationToken.decode(token)
    except TokenFormatError as exc:
        return Verdict.reject(RejectReason.FORMAT, str(exc))
    rak = parsed.rak_cert
    if rak.subject_public != trusted_rak_public or not rak.verify(trusted_rak_public):
        return Verdict.reject(RejectReason.CHAIN, "root certificate is not the trusted one")
    if not parsed.aik_cert.verify(trusted_rak_public):
        return Verdict.reject(RejectReason.CHAIN, "AIK certificate not issued by the root key")
    if not verify_signature(parsed.aik_cert.subject_public, parsed.signature, parsed.tbs()):
        return Verdict.reject(RejectReason.SIGNATURE, "token signature does not verify under the AIK")
    if expected_measurement is not None and parsed.measurement != expected_measurement:
        return Verdict.reject(RejectReason.MEASUREMENT, parsed.measurement.hex())
    if challenge is not None and parsed.challenge != challenge:
        return Verdict.reject(RejectReason.CHALLENGE)
    return Verdict(True)
