# tzcvm_sim/shadow_sync/protection.py
"""
Per-page confidentiality and integrity for data leaving the secure side.

Protected pages are encrypted with AES-XTS (tweak = IPA page index) on the
way out to the shadow and decrypted on the way back in. Each ciphertext page
carries an HMAC-SHA256 tag in a sidecar table that lives next to the shadow,
so the host can move tags together with the data it stores.
"""
from __future__ import annotations

import logging
from typing import Dict, FrozenSet, Iterable, Optional, Set

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, hmac
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from mem_model.config import GRANULE_SIZE

logger = logging.getLogger(__name__)

IO_KEY_BYTES = 32
TAG_BYTES = 32
_XTS_KEY_BYTES = 64
_MAC_KEY_BYTES = 32


def page_tweak(page_index: int) -> bytes:
    return page_index.to_bytes(16, "little")


class PageProtection:
    """Key material and protected-page set for one cVM."""

    def __init__(self, cvm_id: int, io_key: bytes):
        if len(io_key) != IO_KEY_BYTES:
            raise ValueError(f"I/O key must be {IO_KEY_BYTES} bytes, got {len(io_key)}")
        self.cvm_id = cvm_id
        okm = HKDF(
            algorithm=hashes.SHA256(),
            length=_XTS_KEY_BYTES + _MAC_KEY_BYTES,
            salt=None,
            info=b"tzcvm-io-protection",
        ).derive(io_key)
        self._xts_key = okm[:_XTS_KEY_BYTES]
        self._mac_key = okm[_XTS_KEY_BYTES:]
        self._pages: Set[int] = set()
        # shadow-side sidecar: page index -> tag of the ciphertext currently in the shadow
        self.sidecar: Dict[int, bytes] = {}

    # ── Protected set ───────────────────────────────────────────────────────
    @property
    def pages(self) -> FrozenSet[int]:
        return frozenset(self._pages)

    def protect(self, pages: Iterable[int]) -> None:
        self._pages.update(pages)

    def unprotect(self, pages: Iterable[int]) -> None:
        for page in pages:
            self._pages.discard(page)
            self.sidecar.pop(page, None)

    def covers(self, page_index: int) -> bool:
        return page_index in self._pages

    # ── Transform ───────────────────────────────────────────────────────────
    def encrypt(self, page_index: int, plaintext: bytes) -> bytes:
        _check_page(plaintext)
        enc = Cipher(algorithms.AES(self._xts_key), modes.XTS(page_tweak(page_index))).encryptor()
        return enc.update(plaintext) + enc.finalize()

    def decrypt(self, page_index: int, ciphertext: bytes) -> bytes:
        _check_page(ciphertext)
        dec = Cipher(algorithms.AES(self._xts_key), modes.XTS(page_tweak(page_index))).decryptor()
        return dec.update(ciphertext) + dec.finalize()

    def tag(self, page_index: int, ciphertext: bytes) -> bytes:
        mac = hmac.HMAC(self._mac_key, hashes.SHA256())
        mac.update(page_tweak(page_index))
        mac.update(ciphertext)
        return mac.finalize()

    def verify(self, page_index: int, ciphertext: bytes, tag: Optional[bytes]) -> bool:
        if tag is None:
            return False
        mac = hmac.HMAC(self._mac_key, hashes.SHA256())
        mac.update(page_tweak(page_index))
        mac.update(ciphertext)
        try:
            mac.verify(tag)
        except InvalidSignature:
            return False
        return True

    def seal_out(self, page_index: int, plaintext: bytes) -> bytes:
        """Encrypt one page for the shadow and refresh its sidecar tag."""
        ciphertext = self.encrypt(page_index, plaintext)
        self.sidecar[page_index] = self.tag(page_index, ciphertext)
        return ciphertext

    def open_in(self, page_index: int, ciphertext: bytes) -> Optional[bytes]:
        """Plaintext of a shadow page, or None when its tag does not verify."""
        if not self.verify(page_index, ciphertext, self.sidecar.get(page_index)):
            logger.warning("Integrity tag mismatch on cVM %d page %#x", self.cvm_id, page_index)
            return None
        return self.decrypt(page_index, ciphertext)


def _check_page(data: bytes) -> None:
    if len(data) != GRANULE_SIZE:
        raise ValueError(f"page transform needs exactly {GRANULE_SIZE} bytes")
