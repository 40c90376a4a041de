import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attestation.errors import NotActive, SealPolicyMismatch, TagFailure
from attestation.keys import Certificate, Platform, derive_keys
from attestation.sealing import SealedBlob, SealPolicy, current_policy, seal, unseal
from attestation.token import AttestationToken, RejectReason, build_token, verify_token
from conformance_cli.cases import create_raw, expected_measurement, program
from conformance_cli.simulation import Simulation
from host_sim import guest as g
from tmm_core.types import CVmParams

CHALLENGE = bytes(range(64))
IMAGE = {0: b"attested kernel"}


def boot(sim, image=None):
    image = image or IMAGE
    return sim.host.boot_cvm(list(image.items()), CVmParams(), [program(g.Halt())])


@pytest.fixture
def issued(sim):
    cvm = boot(sim)
    return sim, cvm, build_token(sim.monitor, cvm, CHALLENGE).encode()


# ─── Keys ────────────────────────────────────────────────────────────────────
def test_roots_depend_only_on_seed_and_firmware():
    seed, fw = bytes(32), hashlib.sha256(b"fw-1").digest()
    a = derive_keys(seed, fw, b"\x01" * 16)
    b = derive_keys(seed, fw, b"\x02" * 16)
    assert a.rak_public == b.rak_public
    assert a.root_storage_key == b.root_storage_key
    assert a.aik_public != b.aik_public
    assert derive_keys(seed, hashlib.sha256(b"fw-2").digest()).rak_public != a.rak_public


def test_aik_is_certified_by_the_root():
    keys = Platform(rot_seed=bytes(32)).keys
    assert keys.aik_cert.verify(keys.rak_public)
    assert keys.rak_cert.verify(keys.rak_public)
    assert Certificate.decode(keys.aik_cert.encode()) == keys.aik_cert


def test_power_cycle_rotates_only_the_aik():
    platform = Platform(rot_seed=bytes(32))
    before = platform.keys
    after = platform.power_cycle()
    assert platform.boot_count == 1
    assert after.rak_public == before.rak_public
    assert after.aik_public != before.aik_public


def test_io_key_is_bound_to_the_measurement():
    platform = Platform(rot_seed=bytes(32))
    assert platform.io_key(bytes(32)) != platform.io_key(b"\x01" * 32)
    assert len(platform.io_key(bytes(32))) == 32


# ─── Tokens ──────────────────────────────────────────────────────────────────
def test_token_verifies_against_measurement_and_challenge(issued):
    sim, cvm, token = issued
    measurement = expected_measurement(CVmParams(), [program(g.Halt())], IMAGE)
    assert sim.monitor.cvms[cvm].initial_measurement == measurement
    verdict = verify_token(token, sim.platform.keys.rak_public, measurement, CHALLENGE)
    assert verdict
    assert verdict.reason is None
    parsed = AttestationToken.decode(token)
    assert parsed.config_digest == CVmParams().digest()
    assert parsed.firmware_digest == sim.platform.firmware_digest


def test_mismatches_are_named(issued):
    sim, cvm, token = issued
    rak = sim.platform.keys.rak_public
    measurement = sim.monitor.cvms[cvm].initial_measurement
    assert verify_token(token, rak, bytes(32), CHALLENGE).reason is RejectReason.MEASUREMENT
    assert verify_token(token, rak, measurement, bytes(64)).reason is RejectReason.CHALLENGE
    assert verify_token(token[:-3], rak, measurement, CHALLENGE).reason is RejectReason.FORMAT
    assert verify_token(b"", rak).reason is RejectReason.FORMAT
    stranger = Platform(rot_seed=b"\x09" * 32).keys.rak_public
    assert verify_token(token, stranger, measurement, CHALLENGE).reason is RejectReason.CHAIN


# One tenth of the TMI fuzz scale: 10 000 flips under the acceptance profile.
@settings(max_examples=max(settings.default.max_examples // 10, 40))
@given(position=st.data())
def test_any_flipped_bit_is_rejected(issued, position):
    sim, cvm, token = issued
    index = position.draw(st.integers(0, len(token) - 1))
    bit = position.draw(st.integers(0, 7))
    flipped = bytearray(token)
    flipped[index] ^= 1 << bit
    measurement = sim.monitor.cvms[cvm].initial_measurement
    assert not verify_token(bytes(flipped), sim.platform.keys.rak_public, measurement, CHALLENGE)


def test_resigned_by_a_foreign_aik_is_a_signature_failure(issued):
    sim, cvm, token = issued
    parsed = AttestationToken.decode(token)
    forged = replace(parsed, challenge=bytes(64))
    forged = replace(forged, signature=Platform(rot_seed=b"\x07" * 32).keys.aik.sign(forged.tbs()))
    verdict = verify_token(forged.encode(), sim.platform.keys.rak_public)
    assert verdict.reason is RejectReason.SIGNATURE


def test_tokens_survive_a_power_cycle(issued):
    sim, cvm, old = issued
    rak = sim.platform.keys.rak_public
    sim.platform.power_cycle()
    new = build_token(sim.monitor, cvm, CHALLENGE).encode()
    assert AttestationToken.decode(new).aik_cert != AttestationToken.decode(old).aik_cert
    assert verify_token(new, rak, challenge=CHALLENGE)
    assert verify_token(old, rak, challenge=CHALLENGE)


def test_firmware_update_changes_the_trust_root(issued):
    sim, cvm, token = issued
    old_rak = sim.platform.keys.rak_public
    sim.platform.update_firmware(hashlib.sha256(b"patched firmware").digest())
    assert verify_token(token, sim.platform.keys.rak_public).reason is RejectReason.CHAIN
    assert not verify_token(build_token(sim.monitor, cvm, CHALLENGE).encode(), old_rak)


def test_token_needs_an_active_cvm_and_a_full_challenge(sim):
    cvm = create_raw(sim)
    with pytest.raises(NotActive):
        build_token(sim.monitor, cvm, CHALLENGE)
    with pytest.raises(NotActive):
        build_token(sim.monitor, 99, CHALLENGE)
    active = boot(sim)
    with pytest.raises(ValueError):
        build_token(sim.monitor, active, bytes(10))


# ─── Sealing ─────────────────────────────────────────────────────────────────
def test_seal_round_trip(sim):
    cvm = boot(sim)
    blob = seal(sim.monitor, cvm, b"disk key")
    assert b"disk key" not in blob.encode()
    assert SealedBlob.decode(blob.encode()) == blob
    assert unseal(sim.monitor, cvm, blob) == b"disk key"
    assert blob.policy == current_policy(sim.monitor, cvm)


def test_seal_nonces_are_reproducible_and_never_repeat(tmp_path):
    blobs = []
    for run in ("a", "b"):
        sim = Simulation.build(seed=3, blk_dir=tmp_path / run)
        cvm = boot(sim)
        blobs.append([seal(sim.monitor, cvm, b"disk key") for _ in range(3)])
        assert [unseal(sim.monitor, cvm, blob) for blob in blobs[-1]] == [b"disk key"] * 3
    first, second = blobs
    assert first == second
    assert len({blob.nonce for blob in first}) == 3


def test_measurement_bound_blob_opens_only_for_the_same_image(sim):
    a = boot(sim)
    twin = boot(sim)
    other = boot(sim, {0: b"another kernel"})
    blob = seal(sim.monitor, a, b"secret")
    assert unseal(sim.monitor, twin, blob) == b"secret"
    with pytest.raises(SealPolicyMismatch):
        unseal(sim.monitor, other, blob)
    unbound = seal(sim.monitor, a, b"shared", current_policy(sim.monitor, a, bind_measurement=False))
    assert unseal(sim.monitor, other, unbound) == b"shared"


def test_firmware_update_locks_old_blobs(sim):
    cvm = boot(sim)
    blob = seal(sim.monitor, cvm, b"secret")
    sim.platform.power_cycle()
    assert unseal(sim.monitor, cvm, blob) == b"secret"
    sim.platform.update_firmware(hashlib.sha256(b"fw-2").digest())
    with pytest.raises(SealPolicyMismatch):
        unseal(sim.monitor, cvm, blob)


def test_tampering_fails_authentication(sim):
    cvm = boot(sim)
    blob = seal(sim.monitor, cvm, b"secret")
    flipped = bytearray(blob.ciphertext)
    flipped[0] ^= 0x80
    with pytest.raises(TagFailure):
        unseal(sim.monitor, cvm, replace(blob, ciphertext=bytes(flipped)))
    loosened = replace(blob, policy=SealPolicy(blob.policy.required_firmware_digest))
    with pytest.raises(TagFailure):
        unseal(sim.monitor, cvm, loosened)


def test_sealing_needs_an_active_cvm(sim):
    cvm = create_raw(sim)
    with pytest.raises(NotActive):
        seal(sim.monitor, cvm, b"x")
    active = boot(sim)
    blob = seal(sim.monitor, active, b"x")
    sim.host.destroy_cvm(active)
    with pytest.raises(NotActive):
        unseal(sim.monitor, active, blob)
