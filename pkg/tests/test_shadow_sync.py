import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformance_cli.bench import bench_hvc, bench_io, bench_memcpy, count_ipi_round_trips
from mem_model.config import GRANULE_SIZE
from mem_model.granules import GranuleState, MappingPolicy, Requestor, TzascConfig
from mem_model.memory import PhysicalMemory
from shadow_sync.config import REFERENCE_MEMCPY, CalibrationSample, LatencyConstants
from shadow_sync.cost_model import (
    calibrate,
    interrupt_round_trip_us,
    load_model,
    simulate_hvc_latency,
    simulate_io_latency,
    simulate_ipi_latency,
    simulate_memcpy_latency,
)
from shadow_sync.errors import DegenerateFit, NotSharedRegion, RegionOutOfBounds, TokenLeak
from shadow_sync.ledger import CostLedger
from shadow_sync.sync import Direction, ShadowSync

HOST = Requestor.host()
TMM = Requestor.tmm()
IPA = 0x100000
KEY = bytes(range(32))


def direct_pair(pages=2):
    memory = PhysicalMemory(64, MappingPolicy.DIRECT, tzasc=TzascConfig.split(64, 16))
    memory.reserve_secure_region(1, 8)
    secure = [memory.claim(1, GranuleState.DATA) for _ in range(pages)]
    sync = ShadowSync(memory)
    return memory, sync, sync.register(1, IPA, secure)


def dynamic_pair(pages=2):
    memory = PhysicalMemory(32, MappingPolicy.DYNAMIC)
    for i in range(pages):
        memory.delegate(i)
    secure = [memory.claim(1, GranuleState.DATA) for _ in range(pages)]
    sync = ShadowSync(memory)
    return memory, sync, sync.register(1, IPA, secure, [20 + i for i in range(pages)])


# ─── Cost model ──────────────────────────────────────────────────────────────
def test_hypercall_breakdown():
    hvc = simulate_hvc_latency()
    assert len(hvc.steps) == 9
    assert hvc.total == pytest.approx(250.0)
    assert hvc.round_trip == pytest.approx(148.0)
    assert hvc.vanilla == pytest.approx(35.0)


def test_ipi_costs_two_interrupt_round_trips():
    assert interrupt_round_trip_us() == pytest.approx(157.0)
    assert count_ipi_round_trips() == 2
    assert simulate_ipi_latency(2) == pytest.approx(314.0)


def test_calibration_reproduces_the_reference_table():
    model = calibrate([CalibrationSample(size=s, direct_us=d, dynamic_us=y) for s, d, y in REFERENCE_MEMCPY])
    assert model.dynamic_overhead == pytest.approx(1.55)
    for size, direct, dynamic in REFERENCE_MEMCPY:
        assert simulate_memcpy_latency(size, MappingPolicy.DIRECT, model) == pytest.approx(direct, rel=0.10)
        assert simulate_memcpy_latency(size, MappingPolicy.DYNAMIC, model) == pytest.approx(dynamic, rel=0.10)


def test_calibration_needs_two_sizes():
    with pytest.raises(DegenerateFit):
        calibrate([CalibrationSample(size=64, direct_us=1.0, dynamic_us=2.0)] * 3)


@given(size=st.integers(1, 1 << 20))
def test_dynamic_never_beats_direct(size):
    model = load_model()
    direct = simulate_memcpy_latency(size, MappingPolicy.DIRECT, model)
    assert simulate_memcpy_latency(size, MappingPolicy.DYNAMIC, model) > direct
    assert direct >= 0.0


def test_io_model_adds_the_hypercall_and_device_work():
    model = load_model()
    direct = simulate_io_latency(4 * GRANULE_SIZE, MappingPolicy.DIRECT, model=model)
    dynamic = simulate_io_latency(4 * GRANULE_SIZE, MappingPolicy.DYNAMIC, model=model)
    assert direct > 250.0 + LatencyConstants().io_device_model
    assert dynamic - direct == pytest.approx(2 * model.dynamic_overhead)


def test_bench_tables():
    memcpy = bench_memcpy(load_model())
    assert len(memcpy) == 2 * len(REFERENCE_MEMCPY)
    assert memcpy["within_tolerance"].all()
    assert (memcpy["dynamic_slowdown_pct"] > 0).all()
    hvc = bench_hvc()
    assert hvc.iloc[-1]["model_us"] == pytest.approx(250.0)
    assert list(bench_io()["policy"]) == ["direct", "dynamic"]


# ─── Ledger ──────────────────────────────────────────────────────────────────
def test_ledger_is_monotone():
    ledger = CostLedger()
    ledger.record("world_switch", 2)
    with pytest.raises(ValueError):
        ledger.record("world_switch", -1)
    with pytest.raises(KeyError):
        ledger.record("page_faults")
    with pytest.raises(ValueError):
        ledger.record_many(tlb_flush=1, stage2_map=-1)
    assert ledger["tlb_flush"] == 0
    before = ledger.snapshot()
    ledger.record_transfer(100, stage2_map=1)
    delta = ledger.delta(before)
    assert delta["bytes_copied"] == 100 and delta["stage2_map"] == 1 and delta["world_switch"] == 0


def test_ledger_latency_sums_events_and_copies():
    ledger = CostLedger()
    ledger.record("world_switch")
    ledger.record_transfer(4096)
    model = load_model()
    total = ledger.simulated_latency(LatencyConstants(), model)
    assert total == pytest.approx(148.0 + model.copy_cost(4096))


# ─── Transfers ───────────────────────────────────────────────────────────────
def test_direct_transfer_is_a_plain_copy():
    memory, sync, region = direct_pair()
    memory.write(TMM, region.secure[1], b"ring data", 16)
    stats = sync.sync(1, Direction.SECURE_TO_SHADOW)
    assert stats.pages == 2
    assert memory.read(HOST, region.shadow[1], 16, 9) == b"ring data"
    assert memory.ledger["stage2_map"] == memory.ledger["tlb_flush"] == 0
    assert memory.ledger["bytes_copied"] == 2 * GRANULE_SIZE


def test_partial_transfer_touches_only_its_range():
    memory, sync, region = direct_pair()
    memory.write(HOST, region.shadow[0], b"A" * 32)
    sync.sync(1, Direction.SHADOW_TO_SECURE, offset=8, size=8)
    assert memory.read(TMM, region.secure[0], 0, 32) == bytes(8) + b"A" * 8 + bytes(16)


def test_dynamic_transfer_maps_and_flushes():
    memory, sync, region = dynamic_pair()
    memory.write(HOST, 21, b"from host")
    stats = sync.sync(1, Direction.SHADOW_TO_SECURE)
    assert memory.read(TMM, region.secure[1], 0, 9) == b"from host"
    assert stats.counters["stage2_map"] == stats.counters["stage2_unmap"] == stats.counters["tlb_flush"] == 1
    assert sync.open_transfers() == []


def test_only_one_dynamic_transfer_in_flight():
    _, sync, _ = dynamic_pair()
    token = sync.begin_transfer(1, Direction.SECURE_TO_SHADOW)
    with pytest.raises(TokenLeak):
        sync.begin_transfer(1, Direction.SHADOW_TO_SECURE)
    sync.complete_transfer(token)
    with pytest.raises(TokenLeak):
        sync.complete_transfer(token)


def test_bounds_are_enforced():
    _, sync, region = direct_pair()
    with pytest.raises(RegionOutOfBounds):
        sync.sync(1, Direction.SECURE_TO_SHADOW, offset=region.size - 4, size=8)
    with pytest.raises(RegionOutOfBounds):
        sync.sync(2, Direction.SECURE_TO_SHADOW)
    with pytest.raises(RegionOutOfBounds):
        sync.register(1, IPA + 1, list(region.secure))
    with pytest.raises(NotSharedRegion):
        sync.protect_pages(1, [IPA + region.size], KEY)


# ─── Page protection ─────────────────────────────────────────────────────────
def test_protected_pages_leave_encrypted_and_come_back():
    memory, sync, region = direct_pair()
    sync.protect_pages(1, [IPA], KEY)
    memory.write(TMM, region.secure[0], b"plaintext secret")
    memory.write(TMM, region.secure[1], b"clear")
    stats = sync.sync(1, Direction.SECURE_TO_SHADOW)
    assert stats.protected_pages == 1
    assert b"plaintext secret" not in memory.read(HOST, region.shadow[0])
    assert memory.read(HOST, region.shadow[1], 0, 5) == b"clear"
    memory.write(TMM, region.secure[0], bytes(GRANULE_SIZE))
    sync.sync(1, Direction.SHADOW_TO_SECURE)
    assert memory.read(TMM, region.secure[0], 0, 16) == b"plaintext secret"


def test_tampered_shadow_is_detected_and_zeroed():
    memory, sync, region = direct_pair()
    sync.protect_pages(1, [IPA], KEY)
    memory.write(TMM, region.secure[0], b"plaintext secret")
    sync.sync(1, Direction.SECURE_TO_SHADOW)
    tampered = bytearray(memory.read(HOST, region.shadow[0]))
    tampered[100] ^= 1
    memory.write(HOST, region.shadow[0], bytes(tampered))
    stats = sync.sync(1, Direction.SHADOW_TO_SECURE)
    assert stats.integrity_failures == 1
    assert memory.ledger["integrity_failures"] == 1
    assert memory.granule(region.secure[0]).is_zero()


def test_unprotect_returns_pages_to_plain_copies():
    memory, sync, region = direct_pair()
    sync.protect_pages(1, [IPA], KEY)
    sync.unprotect_pages(1, [IPA])
    memory.write(TMM, region.secure[0], b"clear again")
    assert sync.sync(1, Direction.SECURE_TO_SHADOW).protected_pages == 0
    assert memory.read(HOST, region.shadow[0], 0, 11) == b"clear again"
