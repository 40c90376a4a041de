import hashlib
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from conformance_cli.cases import add_tec, create_raw, program, staged
from conformance_cli.simulation import Simulation
from host_sim import guest as g
from mem_model.config import GRANULE_SIZE
from mem_model.granules import MappingPolicy
from tmm_core.errors import InputError, Sealed, StateError
from tmm_core.measurement import EventKind, MeasurementEvent, MeasurementState, fold
from tmm_core.ttt import Attrs, BlockEntry, Ttt
from tmm_core.types import LIFECYCLE_EDGES, U64, CVmParams, CVmState, TmiCommand, TmiRequest, TmiStatus


def fold_boot(params, tecs, image):
    """Hash chain of a host boot, computed without the monitor."""
    current = hashlib.sha256(params.encode()).digest()
    events = [(2, i, hashlib.sha256(t.encode()).digest()) for i, t in enumerate(tecs)]
    events += [(1, ipa, hashlib.sha256(image[ipa].ljust(GRANULE_SIZE, b"\0")).digest()) for ipa in sorted(image)]
    for kind, ipa, digest in events:
        current = hashlib.sha256(current + struct.pack("<BQ", kind, ipa) + digest).digest()
    return current


# ─── Lifecycle ───────────────────────────────────────────────────────────────
def test_lifecycle_walks_new_active_null(sim):
    mon = sim.monitor
    cvm = create_raw(sim)
    assert mon.state_of(cvm) is CVmState.NEW
    assert mon.tmi(TmiCommand.ACTIVATE_CVM, cvm).status is TmiStatus.ERROR_STATE
    assert add_tec(sim, cvm).ok
    assert mon.tmi(TmiCommand.ACTIVATE_CVM, cvm).ok
    assert mon.tmi(TmiCommand.ACTIVATE_CVM, cvm).status is TmiStatus.ERROR_STATE
    assert add_tec(sim, cvm).status is TmiStatus.ERROR_STATE
    history = mon.cvms[cvm].state_history
    owned = sim.memory.owned_by(cvm)
    assert mon.tmi(TmiCommand.DESTROY_CVM, cvm).ok
    assert history == [CVmState.NULL, CVmState.NEW, CVmState.ACTIVE, CVmState.SYSTEM_OFF, CVmState.NULL]
    assert mon.state_of(cvm) is CVmState.NULL
    assert all(sim.memory.granule(i).is_zero() and sim.memory.granule(i).owner is None for i in owned)
    assert mon.tmi(TmiCommand.DESTROY_CVM, cvm).status is TmiStatus.ERROR_INPUT


def test_descriptor_refuses_edges_outside_the_lifecycle(sim):
    cvm = sim.monitor.cvms[create_raw(sim)]
    with pytest.raises(StateError):
        cvm.move(CVmState.NULL)
    with pytest.raises(StateError):
        cvm.move(CVmState.NEW)
    assert cvm.state is CVmState.NEW
    assert cvm.state_history == [CVmState.NULL, CVmState.NEW]


def test_tec_count_is_bounded_by_vcpu_count(sim):
    cvm = create_raw(sim, CVmParams(vcpu_count=2))
    assert add_tec(sim, cvm).ok
    assert add_tec(sim, cvm).ok
    assert add_tec(sim, cvm).status is TmiStatus.ERROR_INPUT


def test_tec_destroy_only_before_activation(sim):
    mon = sim.monitor
    cvm = create_raw(sim, CVmParams(vcpu_count=2))
    first = add_tec(sim, cvm).result(0)
    second = add_tec(sim, cvm).result(0)
    assert mon.tmi(TmiCommand.TEC_DESTROY, second).ok
    assert mon.tmi(TmiCommand.ACTIVATE_CVM, cvm).ok
    assert mon.tmi(TmiCommand.TEC_DESTROY, first).status is TmiStatus.ERROR_STATE


# ─── Measurement ─────────────────────────────────────────────────────────────
@given(
    pages=st.dictionaries(st.integers(0, 31).map(lambda p: p * GRANULE_SIZE), st.binary(max_size=64),
                          min_size=1, max_size=6),
    width=st.sampled_from([36, 40, 44]),
)
def test_boot_measurement_matches_an_independent_fold(tmp_path, pages, width):
    sim = Simulation.build(blk_dir=tmp_path)
    params = CVmParams(ipa_width=width, protected_ipa_limit=1 << (width - 1))
    tecs = [program(g.Halt())]
    cvm = sim.host.boot_cvm(list(pages.items()), params, tecs)
    assert sim.monitor.cvms[cvm].initial_measurement == fold_boot(params, tecs, pages)


def test_vcpu_count_is_measured(tmp_path):
    image = [(0, b"same kernel")]
    sim = Simulation.build(blk_dir=tmp_path)
    one = sim.host.boot_cvm(image, CVmParams(vcpu_count=1), [program(g.Halt())])
    two = sim.host.boot_cvm(image, CVmParams(vcpu_count=4), [program(g.Halt())])
    assert sim.monitor.cvms[one].initial_measurement != sim.monitor.cvms[two].initial_measurement
    assert CVmParams.from_page(CVmParams(vcpu_count=4).to_page()).vcpu_count == 4


def test_measurement_is_sealed_at_activation(sim):
    cvm = sim.host.boot_cvm([(0, b"k")], CVmParams(), [program(g.Halt())])
    with staged(sim, b"late") as (src, _):
        resp = sim.monitor.tmi(TmiCommand.DATA_CREATE, cvm, 0x5000, src)
    assert resp.status is TmiStatus.ERROR_STATE
    assert sim.monitor.cvms[cvm].measurement.sealed
    assert sim.monitor.cvms[cvm].measurement.consistent()


def test_unmeasured_data_leaves_the_measurement_alone(sim):
    cvm = create_raw(sim)
    before = sim.monitor.cvms[cvm].initial_measurement
    for level in (1, 2, 3):
        assert sim.monitor.tmi(TmiCommand.CREATE_TTT, cvm, 0, level).ok
    assert sim.monitor.tmi(TmiCommand.DATA_CREATE_UNKNOWN, cvm, 0).ok
    assert sim.monitor.cvms[cvm].initial_measurement == before


def test_measurement_state_refuses_extension_once_sealed():
    state = MeasurementState.open(bytes(32))
    state.extend(EventKind.DATA, 0, bytes(32))
    sealed = state.seal()
    assert sealed == fold(bytes(32), [MeasurementEvent(EventKind.DATA, 0, bytes(32))])
    with pytest.raises(Sealed):
        state.extend(EventKind.DATA, 0x1000, bytes(32))


# ─── Block mappings ──────────────────────────────────────────────────────────
def test_block_create_measures_like_single_pages(tmp_path):
    pages = 512
    content = b"".join(struct.pack("<I", i) * (GRANULE_SIZE // 4) for i in range(pages))
    sim = Simulation.build(policy=MappingPolicy.DYNAMIC, blk_dir=tmp_path)
    mon = sim.monitor
    for index in list(range(8)) + list(range(512, 1024)):
        assert mon.delegate(index) is TmiStatus.SUCCESS
    cvm = create_raw(sim)
    expected = MeasurementState.open(CVmParams().digest())
    for i in range(pages):
        page = content[i * GRANULE_SIZE:(i + 1) * GRANULE_SIZE]
        expected.extend(EventKind.DATA, i * GRANULE_SIZE, hashlib.sha256(page).digest())
    for level in (1, 2):
        assert mon.tmi(TmiCommand.CREATE_TTT, cvm, 0, level).ok
    with staged(sim, content) as (src, _):
        assert mon.tmi(TmiCommand.DATA_BLOCK_CREATE, cvm, 0, pages, src).ok

    leaf, level = mon.cvms[cvm].ttt.leaf_at(0)
    assert isinstance(leaf, BlockEntry) and level == 2
    assert mon.cvms[cvm].initial_measurement == expected.current
    assert mon.cvms[cvm].ttt.resolve(0x1000 * 7).granule == leaf.granule + 7
    assert mon.scan_ttt_soundness() == []


def test_block_falls_back_to_pages_under_a_level_three_table(tmp_path):
    sim = Simulation.build(blk_dir=tmp_path)
    cvm = create_raw(sim, granules=64)
    for level in (1, 2, 3):
        assert sim.monitor.tmi(TmiCommand.CREATE_TTT, cvm, 0, level).ok
    # a level-3 table already covers [0, 2 MiB): the block falls back to pages and runs out of memory
    resp = sim.monitor.tmi(TmiCommand.DATA_BLOCK_CREATE_UNKNOWN, cvm, 0, 512)
    assert resp.status is TmiStatus.ERROR_MEMORY
    assert sim.monitor.tmi(TmiCommand.DATA_BLOCK_CREATE_UNKNOWN, cvm, 0, 0).status is TmiStatus.ERROR_INPUT
    assert sim.memory.scan_invariants() == []


# ─── Translation tree ────────────────────────────────────────────────────────
@given(st.sets(st.integers(0, 4 * 512 - 1), min_size=1, max_size=40))
def test_ttt_resolves_every_mapped_page(page_numbers):
    ttt = Ttt(root_granule=10_000, ipa_width=40)
    next_granule = iter(range(10_001, 20_000))
    ttt.create_table(0, 1, next(next_granule))
    ttt.create_table(0, 2, next(next_granule))
    for chunk in {p // 512 for p in page_numbers}:
        ipa = chunk * (2 << 20)
        ttt.create_table(ipa, 3, next(next_granule))
    mapping = {}
    for p in sorted(page_numbers):
        granule = 100 + p
        ttt.map_page(p * GRANULE_SIZE, granule, Attrs(protected=True))
        mapping[p * GRANULE_SIZE] = granule

    assert {ipa: ttt.resolve(ipa).granule for ipa in mapping} == mapping
    assert [ipa for ipa, _, _ in ttt.mapped_pages()] == sorted(mapping)
    with pytest.raises(InputError):
        first = min(mapping)
        ttt.map_page(first, 1, Attrs(protected=True))
    with pytest.raises(StateError):
        ttt.destroy_table(min(mapping), 3)


def test_missing_table_reports_the_level_reached():
    ttt = Ttt(root_granule=1, ipa_width=40)
    with pytest.raises(InputError) as info:
        ttt.create_table(0, 3, 2)
    assert info.value.results == (0,)
    ttt.create_table(0, 1, 2)
    with pytest.raises(InputError) as info:
        ttt.map_page(0, 5, Attrs(protected=True))
    assert info.value.results == (1,)


# ─── Dispatcher ──────────────────────────────────────────────────────────────
COMMANDS = st.one_of(st.sampled_from([int(c) for c in TmiCommand]), st.integers(0, 0x200))
ARGS = st.lists(st.one_of(st.integers(0, 4), st.integers(0, 1 << 40), st.just(U64)), max_size=7)


@given(calls=st.lists(st.tuples(COMMANDS, ARGS), min_size=1, max_size=12))
def test_arbitrary_tmi_sequences_keep_memory_sound(tmp_path, calls):
    sim = Simulation.build(blk_dir=tmp_path)
    sim.host.boot_cvm([(0, b"fuzz")], CVmParams(), [program(g.ComputeTicks(ticks=5), g.Halt())])
    for command, args in calls:
        resp = sim.monitor.dispatch(TmiRequest(command, tuple(args)))
        assert isinstance(resp.status, TmiStatus)
    assert sim.memory.scan_invariants() == []
    assert sim.monitor.scan_ttt_soundness() == []


# ─── Lifecycle fuzz ──────────────────────────────────────────────────────────
MAX_LIVE_CVMS = 4
FUZZ_ARGS = st.lists(
    st.one_of(st.integers(0, 8), st.integers(0, 16).map(lambda p: p * GRANULE_SIZE), st.just(U64)),
    max_size=7,
)


class CVmLifecycleMachine(RuleBasedStateMachine):
    """Up to four cVMs under create/activate/destroy and raw TMI traffic."""

    def __init__(self):
        super().__init__()
        self.sim = Simulation.build(seed=3)
        self.seen = {}

    def _live(self):
        return sorted(self.sim.monitor.cvms)

    def _track(self):
        self.seen.update(self.sim.monitor.cvms)

    @precondition(lambda self: len(self._live()) < MAX_LIVE_CVMS)
    @rule(vcpus=st.integers(1, 2))
    def create(self, vcpus):
        create_raw(self.sim, CVmParams(vcpu_count=vcpus), granules=32)
        self._track()

    @precondition(lambda self: self._live())
    @rule(data=st.data())
    def tec(self, data):
        cvm = self.sim.monitor.cvms[data.draw(st.sampled_from(self._live()))]
        expected = cvm.state is CVmState.NEW and len(cvm.tecs) < cvm.params.vcpu_count
        assert add_tec(self.sim, cvm.cvm_id).ok == expected

    @precondition(lambda self: self._live())
    @rule(data=st.data())
    def activate(self, data):
        cvm = self.sim.monitor.cvms[data.draw(st.sampled_from(self._live()))]
        expected = cvm.state is CVmState.NEW and bool(cvm.tecs)
        assert self.sim.monitor.tmi(TmiCommand.ACTIVATE_CVM, cvm.cvm_id).ok == expected

    @precondition(lambda self: self._live())
    @rule(data=st.data())
    def destroy(self, data):
        cvm_id = data.draw(st.sampled_from(self._live()))
        owned = self.sim.memory.owned_by(cvm_id)
        assert self.sim.monitor.tmi(TmiCommand.DESTROY_CVM, cvm_id).ok
        assert self.seen[cvm_id].state is CVmState.NULL
        assert all(self.sim.memory.granule(i).is_zero() and self.sim.memory.granule(i).owner is None
                   for i in owned)

    @rule(command=st.sampled_from(list(TmiCommand)), args=FUZZ_ARGS)
    def raw(self, command, args):
        mon = self.sim.monitor
        owners = self.sim.memory.snapshot_owners()
        states = {i: c.state for i, c in mon.cvms.items()}
        tecs = sorted(mon.tecs)
        resp = mon.dispatch(TmiRequest(int(command), tuple(args)))
        if not resp.ok:
            assert self.sim.memory.snapshot_owners() == owners
            assert {i: c.state for i, c in mon.cvms.items()} == states
            assert sorted(mon.tecs) == tecs
        self._track()

    @invariant()
    def only_permitted_transitions(self):
        for cvm in self.seen.values():
            steps = list(zip(cvm.state_history, cvm.state_history[1:]))
            assert all(step in LIFECYCLE_EDGES for step in steps), steps

    @invariant()
    def sound(self):
        assert self.sim.memory.scan_invariants() == []
        assert self.sim.monitor.scan_ttt_soundness() == []


CVmLifecycleMachine.TestCase.settings = settings(settings.default, stateful_step_count=20)
TestCVmLifecycle = CVmLifecycleMachine.TestCase


def test_failed_commands_do_not_change_ownership(sim):
    cvm = sim.host.boot_cvm([(0, b"k")], CVmParams(), [program(g.Halt())])
    before = sim.memory.snapshot_owners()
    for request in (
        TmiRequest(int(TmiCommand.CREATE_TTT), (cvm, 0, 1)),
        TmiRequest(int(TmiCommand.DATA_DESTROY), (cvm, 0x7000)),
        TmiRequest(int(TmiCommand.MAP_PROTECTED), (cvm, 0)),
        TmiRequest(int(TmiCommand.TEC_ENTER), (99,)),
    ):
        assert not sim.monitor.dispatch(request).ok
    assert sim.memory.snapshot_owners() == before


def test_feature_register_masks_platform_features(sim):
    params = CVmParams(feature_mask=0x21)
    cvm = sim.host.boot_cvm([(0, b"k")], params, [program(g.Halt())])
    assert sim.monitor.read_feature_register(cvm) == 0x21 & sim.monitor.features
    with pytest.raises(InputError):
        sim.monitor.read_feature_register(cvm, 1)
    with pytest.raises(InputError):
        sim.monitor.read_feature_register(create_raw(sim, params))


def test_malformed_list_register_word_is_rejected(sim):
    cvm = sim.host.boot_cvm([(0, b"k")], CVmParams(), [program(g.Halt())])
    tec = sim.monitor.cvms[cvm].tecs[0]
    resp = sim.monitor.tmi(TmiCommand.TEC_ENTER, tec, 10, 0, 0, 0, 0, 0xE000)
    assert resp.status is TmiStatus.ERROR_INPUT


def test_exit_reports_only_sanctioned_fields(sim):
    cvm = sim.host.boot_cvm([(0, b"k")], CVmParams(), [program(g.HostCall(args=[0x42, 7]), g.Halt())])
    tec = sim.monitor.cvms[cvm].tecs[0]
    resp = sim.monitor.tmi(TmiCommand.TEC_ENTER, tec, 100)
    assert resp.exit.host_call_args == (0x42, 7, 0, 0, 0, 0, 0)
    assert resp.results[0] == int(resp.exit.reason)
    assert set(resp.exit.to_dict()) == {
        "reason", "fault_ipa", "fault_write", "write_value", "host_call_args",
        "psci_function", "psci_target", "psci_entry", "idle",
    }
