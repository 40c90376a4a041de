# tzcvm_sim/host_sim/errors.py

from __future__ import annotations

from typing import Optional


class HostError(Exception):
    """Base error for the untrusted host model."""


class BootFailed(HostError):
    def __init__(self, step: str, status: Optional[int] = None, message: str = ""):
        super().__init__(message or f"boot failed at {step} (status {status})")
        self.step = step
        self.status = status


class NoFreeListRegister(HostError):
    pass


class BadDescriptor(HostError):
    pass


class BackendError(HostError):
    pass
