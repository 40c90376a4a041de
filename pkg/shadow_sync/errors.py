# tzcvm_sim/shadow_sync/errors.py


class ShadowSyncError(Exception):
    """Base error for shadow synchronization and the cost model."""


class RegionOutOfBounds(ShadowSyncError):
    """Transfer range falls outside the registered secure/shadow pair."""


class TokenLeak(ShadowSyncError):
    """A dynamic transfer was started while the previous one is still mapped."""


class NotSharedRegion(ShadowSyncError):
    pass


class Uncalibrated(ShadowSyncError):
    pass


class DegenerateFit(ShadowSyncError):
    pass
