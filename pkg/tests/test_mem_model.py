import pytest
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from mem_model.config import GRANULE_SIZE
from mem_model.config import settings as mem_settings
from mem_model.errors import (
    AccessFault,
    OutOfSecureMemory,
    OverlappingRegions,
    PolicyMismatch,
    RegionLimitExceeded,
    RegionOutOfBounds,
    SetupPhaseClosed,
    WrongState,
)
from mem_model.granules import (
    AccessMode,
    AccessResult,
    GranuleState,
    MappingPolicy,
    Requestor,
    TzascConfig,
    TzascRegion,
    World,
)
from mem_model.memory import PhysicalMemory

HOST = Requestor.host()
TMM = Requestor.tmm()


# ─── TZASC ───────────────────────────────────────────────────────────────────
def test_split_places_secure_region_at_the_bottom():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    assert memory.granule(15).world is World.SECURE
    assert memory.granule(16).world is World.NORMAL
    assert memory.granule(0).state is GranuleState.SECURE_FREE
    assert memory.scan_invariants() == []


def test_nine_regions_are_rejected():
    cfg = TzascConfig(tuple(TzascRegion(i * 4, 4, i % 2 == 0) for i in range(9)))
    with pytest.raises(RegionLimitExceeded):
        cfg.checked(64)


def test_overlapping_and_oversized_regions_are_rejected():
    with pytest.raises(OverlappingRegions):
        TzascConfig((TzascRegion(0, 8, True), TzascRegion(4, 8, False))).checked(64)
    with pytest.raises(RegionOutOfBounds):
        TzascConfig((TzascRegion(60, 8, True),)).checked(64)


def test_checked_sorts_by_base():
    cfg = TzascConfig((TzascRegion(32, 8, True), TzascRegion(0, 8, False))).checked(64)
    assert [r.base for r in cfg.regions] == [0, 32]


def test_gaps_between_regions_default_to_normal():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig((TzascRegion(8, 4, True),)))
    assert memory.granule(7).world is World.NORMAL
    assert memory.granule(8).world is World.SECURE
    assert memory.granule(12).world is World.NORMAL


def test_tzasc_is_locked_once_a_cvm_owns_memory():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    memory.reserve_secure_region(1, 4)
    with pytest.raises(SetupPhaseClosed):
        memory.configure_tzasc(TzascConfig.split(64, 32))


# ─── Access gate ─────────────────────────────────────────────────────────────
def test_host_faults_on_secure_granules_and_is_audited():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    with pytest.raises(AccessFault):
        memory.read(HOST, 3)
    with pytest.raises(AccessFault):
        memory.write(HOST, 3, b"x")
    assert memory.host_secure_touches() == [(3, AccessMode.READ), (3, AccessMode.WRITE)]
    memory.write(HOST, 40, b"ok")
    assert memory.read(HOST, 40, 0, 2) == b"ok"
    assert memory.scan_invariants() == []


def test_audit_keeps_only_the_most_recent_host_accesses(monkeypatch):
    monkeypatch.setattr(mem_settings, "audit_limit", 3)
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    for index in range(5):
        with pytest.raises(AccessFault):
            memory.read(HOST, index)
    assert memory.host_secure_touches() == [(i, AccessMode.READ) for i in (2, 3, 4)]
    assert len(memory.audit) == 3


def test_cvm_reaches_only_its_own_secure_granules():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    a = memory.reserve_secure_region(1, 4)
    b = memory.reserve_secure_region(2, 4)
    assert memory.check_access(Requestor.cvm(1), a.base, AccessMode.READ) is AccessResult.ALLOWED
    assert memory.check_access(Requestor.cvm(1), b.base, AccessMode.READ) is AccessResult.FAULT
    assert memory.check_access(Requestor.cvm(1), 40, AccessMode.WRITE) is AccessResult.ALLOWED
    assert memory.check_access(TMM, b.base, AccessMode.WRITE) is AccessResult.ALLOWED


def test_spans_may_not_cross_a_granule():
    memory = PhysicalMemory(16, MappingPolicy.DYNAMIC)
    with pytest.raises(ValueError):
        memory.write(HOST, 0, b"xx", GRANULE_SIZE - 1)


# ─── Direct policy ───────────────────────────────────────────────────────────
def test_region_reserve_and_release_scrubs_contents():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    region = memory.reserve_secure_region(1, 4)
    assert all(memory.granule(i).state is GranuleState.NS_SHADOW for i in region.shadow_granules())
    granule = memory.claim(1, GranuleState.DATA)
    memory.write(TMM, granule, b"secret")
    memory.release_secure_region(1)
    assert memory.granule(granule).is_zero()
    assert memory.granule(granule).owner is None
    assert all(memory.granule(i).state is GranuleState.NS_FREE for i in region.shadow_granules())
    assert memory.scan_invariants() == []


def test_regions_do_not_overlap_and_run_out():
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    a = memory.reserve_secure_region(1, 8)
    b = memory.reserve_secure_region(2, 8)
    assert set(a.granules()).isdisjoint(b.granules())
    with pytest.raises(OutOfSecureMemory):
        memory.reserve_secure_region(3, 1)
    with pytest.raises(PolicyMismatch):
        memory.delegate(40)


# ─── Dynamic policy ──────────────────────────────────────────────────────────
def test_delegate_zeroes_and_flips_the_world():
    memory = PhysicalMemory(16, MappingPolicy.DYNAMIC)
    memory.write(HOST, 5, b"left over")
    memory.delegate(5)
    assert memory.granule(5).world is World.SECURE
    assert memory.granule(5).is_zero()
    assert memory.ledger["smc_calls"] == 1
    with pytest.raises(WrongState):
        memory.delegate(5)
    memory.undelegate(5)
    assert memory.granule(5).state is GranuleState.NS_FREE
    with pytest.raises(WrongState):
        memory.undelegate(5)


def test_assigned_granules_cannot_be_undelegated():
    memory = PhysicalMemory(16, MappingPolicy.DYNAMIC)
    memory.delegate(2)
    granule = memory.claim(7, GranuleState.TEC)
    assert granule == 2
    with pytest.raises(WrongState):
        memory.undelegate(2)
    memory.free(2)
    assert memory.granule(2).state is GranuleState.DELEGATED
    memory.undelegate(2)
    assert memory.scan_invariants() == []


# ─── Fuzz ────────────────────────────────────────────────────────────────────
GRANULES = 24


class DynamicMemoryMachine(RuleBasedStateMachine):
    """Random delegation traffic never breaks the world/state/owner invariants."""

    def __init__(self):
        super().__init__()
        self.memory = PhysicalMemory(GRANULES, MappingPolicy.DYNAMIC)
        self.assigned = {}

    @rule(index=st.integers(0, GRANULES - 1))
    def delegate(self, index):
        state = self.memory.granule(index).state
        if state is GranuleState.NS_FREE:
            self.memory.delegate(index)
            assert self.memory.granule(index).state is GranuleState.DELEGATED
        else:
            with pytest.raises(WrongState):
                self.memory.delegate(index)

    @rule(index=st.integers(0, GRANULES - 1))
    def undelegate(self, index):
        state = self.memory.granule(index).state
        if state is GranuleState.DELEGATED:
            self.memory.undelegate(index)
            assert self.memory.granule(index).is_zero()
        else:
            with pytest.raises(WrongState):
                self.memory.undelegate(index)

    @rule(cvm=st.integers(1, 3), role=st.sampled_from([GranuleState.DATA, GranuleState.TTT, GranuleState.TEC]))
    def claim(self, cvm, role):
        if self.memory.free_secure_count(cvm) == 0:
            with pytest.raises(OutOfSecureMemory):
                self.memory.claim(cvm, role)
            return
        index = self.memory.claim(cvm, role)
        self.memory.write(Requestor.cvm(cvm), index, b"cvm data")
        self.assigned[index] = cvm

    @precondition(lambda self: self.assigned)
    @rule(data=st.data())
    def free(self, data):
        index = data.draw(st.sampled_from(sorted(self.assigned)))
        del self.assigned[index]
        self.memory.free(index)
        assert self.memory.granule(index).is_zero()

    @rule(index=st.integers(0, GRANULES - 1), payload=st.binary(min_size=1, max_size=32))
    def host_write(self, index, payload):
        secure = self.memory.granule(index).world is World.SECURE
        if secure:
            with pytest.raises(AccessFault):
                self.memory.write(HOST, index, payload)
        else:
            self.memory.write(HOST, index, payload)

    @invariant()
    def sound(self):
        assert self.memory.scan_invariants() == []

    @invariant()
    def owners_match_claims(self):
        owned = {g.index: g.owner for g in self.memory.granules if g.owner is not None}
        assert owned == self.assigned


TestDynamicMemory = DynamicMemoryMachine.TestCase
