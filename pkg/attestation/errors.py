# tzcvm_sim/attestation/errors.py


class AttestationError(Exception):
    """Base error for the key hierarchy, tokens and sealed storage."""


class NotActive(AttestationError):
    """Token or sealing request for a cVM that is not ACTIVE."""


class TokenFormatError(AttestationError, ValueError):
    pass


class SealPolicyMismatch(AttestationError):
    """The current cVM or firmware does not satisfy the blob's policy."""


class TagFailure(AttestationError):
    """Authenticated decryption of a sealed blob failed."""
