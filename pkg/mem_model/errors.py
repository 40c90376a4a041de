# tzcvm_sim/mem_model/errors.py
"""
Exception hierarchy for the granule memory model.
"""


class MemoryModelError(Exception):
    """Base error for physical memory operations."""


class TzascError(MemoryModelError, ValueError):
    """Invalid TZASC configuration (also a ValueError so pydantic validators surface it)."""


class RegionLimitExceeded(TzascError):
    pass


class OverlappingRegions(TzascError):
    pass


class RegionOutOfBounds(TzascError):
    pass


class SetupPhaseClosed(MemoryModelError):
    """TZASC reprogramming attempted after a cVM already owns memory."""


class OutOfSecureMemory(MemoryModelError):
    pass


class OutOfShadowMemory(MemoryModelError):
    pass


class UnknownCVm(MemoryModelError):
    pass


class WrongState(MemoryModelError):
    pass


class PolicyMismatch(MemoryModelError):
    """Operation not available under the active mapping policy."""


class AccessFault(MemoryModelError):
    """Raised by the byte accessors when check_access returns Fault."""

    def __init__(self, requestor: object, index: int, mode: object):
        super().__init__(f"{requestor} {mode} access to granule {index} faulted")
        self.requestor = requestor
        self.index = index
        self.mode = mode
