import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformance_cli.cases import IO_IPA, descriptors, io_layout, program, reads, virqs
from host_sim import guest as g
from host_sim.config import BLK_INTID, TIMER_INTID, HostPolicy
from host_sim.errors import BootFailed, HostError, NoFreeListRegister
from host_sim.gic import GicState, Group, decode_sgir, sgir_value
from host_sim.host import Host
from host_sim.virtio import blk_header, blk_request
from mem_model.granules import GranuleState, MappingPolicy
from tmm_core.types import CVmParams, CVmState

PAYLOAD = b"sector payload"


# ─── GIC ─────────────────────────────────────────────────────────────────────
def test_lowest_pending_non_secure_interrupt_wins():
    gic = GicState()
    gic.configure(20, 0, Group.G0_SECURE)
    gic.assert_interrupt(20, 0)
    gic.assert_interrupt(45, 0)
    gic.assert_interrupt(30, 0)
    gic.assert_interrupt(10, 1)
    assert gic.pending_for(0) == 30
    assert gic.acknowledge(0) == 30
    assert gic.acknowledge(0) == 45
    assert gic.acknowledge(0) is None
    assert gic.pending_for(1) == 10


def test_list_registers_run_out():
    gic = GicState(list_registers=4)
    for intid in range(4):
        gic.write_lr(7, 40 + intid)
    with pytest.raises(NoFreeListRegister):
        gic.write_lr(7, 50)
    assert gic.lr_writes == 4
    gic.forget(7)
    assert gic.list_registers(7) == [None] * 4


def test_concurrent_list_register_writes_never_share_a_slot():
    gic = GicState(list_registers=64)
    start = threading.Barrier(8)
    slots = []

    def writer(worker):
        start.wait()
        for n in range(8):
            slots.append(gic.write_lr(7, 8 * worker + n))
            gic.forget(100 + worker)

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(slots) == list(range(64))
    assert gic.lr_writes == 64
    assert sorted(lr.intid for lr in gic.list_registers(7)) == list(range(64))


@given(intid=st.integers(0, 15), targets=st.sets(st.integers(0, 7), min_size=1))
def test_sgir_encoding(intid, targets):
    assert decode_sgir(sgir_value(sorted(targets), intid)) == (intid, sorted(targets))


# ─── Host setup ──────────────────────────────────────────────────────────────
def test_host_policy_must_match_memory(sim):
    with pytest.raises(HostError):
        Host(sim.monitor, HostPolicy(mapping_policy=MappingPolicy.DYNAMIC))


def test_ns_allocator_stages_from_the_top(sim):
    base, pages = sim.host.ns.stage(b"x" * 5000)
    assert pages == 2
    assert base + pages == len(sim.memory)
    assert sim.host.ns.alloc() == base - 1
    sim.host.ns.release(base, pages)
    assert sim.host.ns.alloc(2) == base


def test_boot_run_destroy_follows_the_seven_steps(sim):
    cvm = sim.host.boot_cvm([(0, b"hello")], CVmParams(), [program(g.TsiCall(function="version"), g.Halt())])
    assert sim.monitor.state_of(cvm) is CVmState.ACTIVE
    report = sim.host.run(cvm)
    assert report.destroyed
    assert report.final_state == CVmState.NULL.value
    assert report.counters["world_switch"] >= 1
    assert sim.host.steps_of(cvm) == [
        "step1_create", "step2_tec_create", "step3_load", "step4_activate",
        "step5_run", "step6_exit", "step7_destroy",
    ]
    with pytest.raises(HostError):
        sim.host.run(cvm)


def test_boot_refuses_more_programs_than_vcpus(sim):
    with pytest.raises(BootFailed) as info:
        sim.host.boot_cvm([(0, b"x")], CVmParams(vcpu_count=1), [program(g.Halt())] * 2)
    assert info.value.step == "step2_tec_create"
    assert sim.monitor.cvms == {}


def test_dynamic_teardown_undelegates_everything(dynamic_sim):
    sim = dynamic_sim
    cvm = sim.host.boot_cvm([(0, b"dyn" * 2000)], CVmParams(), [program(g.Halt())], io_ipa=IO_IPA)
    assert sim.memory.owned_by(cvm)
    report = sim.host.run(cvm)
    assert report.destroyed
    assert all(gr.state is GranuleState.NS_FREE for gr in sim.memory.granules)
    assert sim.memory.scan_invariants() == []


# ─── Exits ───────────────────────────────────────────────────────────────────
def test_protected_fault_is_backed_by_a_fresh_page(sim):
    guest = program(g.MemWrite(ipa=0x7000, data="abcd"), g.MemRead(ipa=0x7000, length=2), g.Halt())
    cvm = sim.host.boot_cvm([(0, b"fault")], CVmParams(), [guest])
    report = sim.host.run(cvm)
    assert report.exits["DATA_ABORT"] == 1
    assert reads(report.guest_traces[0]) == ["abcd"]


def test_unprotected_fault_parks_the_vcpu(sim):
    guest = program(g.MemRead(ipa=1 << 39, length=4), g.Halt())
    cvm = sim.host.boot_cvm([(0, b"park")], CVmParams(), [guest])
    report = sim.host.run(cvm)
    assert report.deadlock
    assert report.faulted == [0]
    assert report.final_state == CVmState.ACTIVE.value
    assert sim.host.destroy_cvm(cvm).ok


def test_timer_interrupt_wakes_an_idle_vcpu(sim):
    cvm = sim.host.boot_cvm([(0, b"wfi")], CVmParams(), [program(g.Wfi(), g.Halt())])
    report = sim.host.run(cvm, interrupts=[(1, TIMER_INTID, 0)])
    assert virqs(report.guest_traces[0]) == [TIMER_INTID]
    assert report.counters["lr_writes"] == 1
    assert report.destroyed


def test_host_call_results_come_from_the_responder(sim):
    cvm = sim.host.boot_cvm([(0, b"hc")], CVmParams(), [program(g.HostCall(args=[5, 6]), g.Halt())],
                            responder={5: [11, 12, 13, 14, 15]})
    report = sim.host.run(cvm)
    assert report.exits["HOST_CALL"] == 1
    assert [e["host_call_ret"] for e in report.guest_traces[0] if "host_call_ret" in e] == [[11, 12, 13, 14]]


# ─── Virtio ──────────────────────────────────────────────────────────────────
@pytest.mark.parametrize("fixture", ["sim", "dynamic_sim"])
def test_blk_write_reaches_the_image(request, fixture):
    sim = request.getfixturevalue(fixture)
    layout = io_layout()
    header, status, buf = layout.data_page(0), layout.data_page(0) + 0x800, layout.data_page(1)
    guest = program(
        g.MemWrite(ipa=status, data="ff"),
        g.MemWrite(ipa=header, data=blk_header(True, 3).hex()),
        g.MemWrite(ipa=buf, data=PAYLOAD.hex()),
        g.VirtioSubmit(device="blk", descriptors=descriptors(blk_request(layout, header, buf, 512, status, True))),
        g.Wfi(),
        g.MemRead(ipa=status, length=1),
        g.Halt(),
    )
    cvm = sim.host.boot_cvm([(0, b"blk")], CVmParams(), [guest], io_ipa=IO_IPA)
    backend = sim.host.cvms[cvm].devices["blk"].backend
    report = sim.host.run(cvm)
    assert report.destroyed
    assert backend.read(3, len(PAYLOAD)) == PAYLOAD
    assert reads(report.guest_traces[0]) == ["00"]
    assert virqs(report.guest_traces[0]) == [BLK_INTID]
    assert report.counters["sync_transfers"] > 0


@pytest.mark.parametrize("fixture", ["sim", "dynamic_sim"])
def test_blk_round_trip_copies_every_touched_byte_twice(request, fixture, monkeypatch):
    sim = request.getfixturevalue(fixture)
    layout = io_layout()
    header, status, buf = layout.data_page(0), layout.data_page(0) + 0x800, layout.data_page(1)
    guest = program(
        g.MemWrite(ipa=header, data=blk_header(False, 0).hex()),
        g.VirtioSubmit(device="blk", descriptors=descriptors(blk_request(layout, header, buf, 512, status, False))),
        g.Wfi(),
        g.Halt(),
    )
    cvm = sim.host.boot_cvm([(0, b"blk")], CVmParams(), [guest], io_ipa=IO_IPA)
    serve, spans_of = sim.host.virtio_serve, sim.host.touched_spans
    touched, copied = [], []

    def recording_spans(dev, layout, chains):
        spans = spans_of(dev, layout, chains)
        touched.append(sum(length for _, length in spans))
        return spans

    def recording_serve(cvm_id, device):
        before = sim.monitor.ledger.snapshot()
        done = serve(cvm_id, device)
        copied.append(sim.monitor.ledger.delta(before)["bytes_copied"])
        return done

    monkeypatch.setattr(sim.host, "touched_spans", recording_spans)
    monkeypatch.setattr(sim.host, "virtio_serve", recording_serve)
    assert sim.host.run(cvm).destroyed
    assert touched and len(copied) == len(touched)
    assert copied == [2 * n for n in touched]
