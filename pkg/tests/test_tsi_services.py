import hashlib

from hypothesis import given, settings
from hypothesis import strategies as st

from attestation.token import verify_token
from conformance_cli.cases import program, tsi_entries
from conformance_cli.simulation import Simulation, token_from_trace
from host_sim import guest as g
from host_sim.guest import words_from_bytes
from mem_model.config import GRANULE_SIZE
from tmm_core.types import CVmParams

CHALLENGE = bytes(range(64))
BUFFER = 0x1000
IMAGE = [(0, b"tsi guest"), (BUFFER, bytes(GRANULE_SIZE))]


def run_guest(sim, *instructions, responder=None):
    cvm = sim.host.boot_cvm(IMAGE, CVmParams(), [program(*instructions, g.Halt())], responder=responder)
    measurement = sim.monitor.cvms[cvm].initial_measurement
    report = sim.host.run(cvm)
    assert report.destroyed
    return report.guest_traces[0], measurement


def statuses(trace, function):
    return [e["status"] for e in tsi_entries(trace, function)]


def test_version_and_config(sim):
    params = CVmParams(ipa_width=44)
    cvm = sim.host.boot_cvm(IMAGE, params, [program(g.TsiCall(function="version"),
                                                    g.TsiCall(function="cvm_config"), g.Halt())])
    trace = sim.host.run(cvm).guest_traces[0]
    assert tsi_entries(trace, "version")[0]["results"] == [1, 0]
    config = tsi_entries(trace, "cvm_config")[0]["results"]
    assert config == [44, 1, params.protected_ipa_limit, params.hash_algo, params.feature_mask]
    assert sim.monitor.tsi.calls["version"] == 1


def test_measurement_read_returns_the_initial_measurement_in_registers(sim):
    trace, measurement = run_guest(sim, g.TsiCall(function="measurement_read", args=[0]))
    entry = tsi_entries(trace, "measurement_read")[0]
    assert entry["data"] == measurement.hex()
    assert entry["results"] == words_from_bytes(measurement, 4)


def test_rem_slots_chain_independently(sim):
    a, b = b"\x11" * 32, b"\x22" * 32
    trace, _ = run_guest(
        sim,
        g.TsiCall(function="measurement_extend", args=[2], data=a.hex()),
        g.TsiCall(function="measurement_extend", args=[2], data=b.hex()),
        g.TsiCall(function="measurement_extend", args=[4, 7]),
        g.TsiCall(function="measurement_read", args=[1]),
        g.TsiCall(function="measurement_read", args=[2]),
        g.TsiCall(function="measurement_read", args=[4]),
    )
    rem1, rem2, rem4 = (e["data"] for e in tsi_entries(trace, "measurement_read"))
    assert rem1 == bytes(32).hex()
    first = hashlib.sha256(bytes(32) + a).digest()
    assert rem2 == hashlib.sha256(first + b).hexdigest()
    assert rem4 == hashlib.sha256(bytes(32) + (7).to_bytes(8, "little")).hexdigest()


def test_out_of_range_measurement_indices(sim):
    trace, _ = run_guest(
        sim,
        g.TsiCall(function="measurement_read", args=[5]),
        g.TsiCall(function="measurement_extend", args=[0], data="00"),
        g.TsiCall(function="measurement_extend", args=[5], data="00"),
    )
    assert statuses(trace, "measurement_read") == ["ERROR_INPUT"]
    assert statuses(trace, "measurement_extend") == ["ERROR_INPUT", "ERROR_INPUT"]


def test_token_is_copied_into_guest_memory_chunk_by_chunk(sim):
    calls = [g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex())]
    calls += [g.TsiCall(function="attestation_token_continue", args=[BUFFER, 512])] * 4
    trace, measurement = run_guest(sim, *calls[:2], g.MemRead(ipa=BUFFER, length=512), *calls[2:])
    length = tsi_entries(trace, "attestation_token_init")[0]["results"][0]
    token = token_from_trace(trace)
    assert len(token) == length
    assert [e["data"] for e in trace if "read" in e][0] == token[:512].hex()
    continues = statuses(trace, "attestation_token_continue")
    assert continues[-1] == "SUCCESS"
    assert set(continues[:-1]) <= {"INCOMPLETE", "SUCCESS"}
    assert verify_token(token, sim.platform.keys.rak_public, measurement, CHALLENGE)


@settings(max_examples=6)
@given(chunk=st.integers(64, GRANULE_SIZE))
def test_any_chunk_size_reassembles_a_valid_token(tmp_path, chunk):
    sim = Simulation.build(seed=3, blk_dir=tmp_path / "blk")
    calls = [g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex())]
    calls += [g.TsiCall(function="attestation_token_continue", args=[BUFFER, chunk])] * (2048 // chunk + 2)
    trace, measurement = run_guest(sim, *calls)
    token = token_from_trace(trace)
    assert len(token) == tsi_entries(trace, "attestation_token_init")[0]["results"][0]
    assert sum(1 for e in tsi_entries(trace, "attestation_token_continue") if "data" in e) == -(-len(token) // chunk)
    assert verify_token(token, sim.platform.keys.rak_public, measurement, CHALLENGE)


def test_token_retrieval_state_machine(sim):
    trace, _ = run_guest(
        sim,
        g.TsiCall(function="attestation_token_continue", args=[BUFFER, 64]),
        g.TsiCall(function="attestation_token_init", data="00" * 63),
        g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex()),
        g.TsiCall(function="attestation_token_continue", args=[BUFFER, 64]),
        g.TsiCall(function="attestation_token_init", data=CHALLENGE.hex()),
        g.TsiCall(function="attestation_token_continue", args=[0x40000, 64]),
        g.TsiCall(function="attestation_token_continue", args=[0, 0]),
        g.TsiCall(function="attestation_token_continue", args=[BUFFER, 64]),
    )
    assert statuses(trace, "attestation_token_init") == ["ERROR_INPUT", "SUCCESS", "ERROR_STATE"]
    assert statuses(trace, "attestation_token_continue") == [
        "ERROR_STATE", "INCOMPLETE", "ERROR_INPUT", "SUCCESS", "ERROR_STATE",
    ]


def test_host_call_round_trips_through_the_host(sim):
    trace, _ = run_guest(
        sim,
        g.TsiCall(function="host_call", args=[0x42, 1, 2]),
        g.TsiCall(function="host_call", args=[0x43]),
        responder={0x42: (10, 20)},
    )
    returns = [e["host_call_ret"] for e in trace if "host_call_ret" in e]
    assert returns == [[10, 20, 0, 0], [0, 0, 0, 0]]
    assert sim.monitor.tsi.calls["host_call"] == 2
