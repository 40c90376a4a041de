# tzcvm_sim/tmm_core/errors.py
"""
Monitor-internal exceptions. None of these cross the TMI boundary: the
dispatcher turns a TmiError into a response carrying its status code.
"""
from __future__ import annotations

from typing import Tuple

from .types import TmiStatus


class TmiError(Exception):
    def __init__(self, status: TmiStatus, message: str = "", results: Tuple[int, ...] = ()):
        super().__init__(message or status.name)
        self.status = status
        self.results = results


class InputError(TmiError):
    def __init__(self, message: str = "", results: Tuple[int, ...] = ()):
        super().__init__(TmiStatus.ERROR_INPUT, message, results)


class StateError(TmiError):
    def __init__(self, message: str = ""):
        super().__init__(TmiStatus.ERROR_STATE, message)


class OutOfMemory(TmiError):
    def __init__(self, message: str = ""):
        super().__init__(TmiStatus.ERROR_MEMORY, message)


class PolicyError(TmiError):
    def __init__(self, message: str = ""):
        super().__init__(TmiStatus.ERROR_POLICY, message)


class Sealed(Exception):
    """Measurement log extended after activation."""
