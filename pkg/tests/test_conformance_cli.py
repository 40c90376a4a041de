import json
from pathlib import Path

import pytest

import orchestrator
from attestation.token import verify_token
from conformance_cli.bench import bench_table
from conformance_cli.cases import CASES, select
from conformance_cli.config import CATEGORIES
from conformance_cli.config import settings as cli_settings
from conformance_cli.errors import ParseError, ScenarioError
from conformance_cli.main import run_bench, run_conformance, run_scenario, verify_attestation
from conformance_cli.replay import replay_trace
from conformance_cli.report import FAIL, PASS, SKIP
from conformance_cli.scenario import dump_scenario, load_scenario, parse_scenario
from mem_model.granules import MappingPolicy

DEMO = Path(__file__).resolve().parent.parent / "scenarios" / "demo.json"
MINIMAL = {"cvms": [{"name": "m", "tecs": [{"program": [{"op": "halt"}]}]}]}


def scenario_text(**memory):
    doc = dict(MINIMAL, memory=memory) if memory else MINIMAL
    return json.dumps(doc, indent=2)


# ─── Scenario files ──────────────────────────────────────────────────────────
def test_demo_scenario_round_trips():
    scenario = load_scenario(DEMO)
    assert scenario.name == "demo"
    assert dump_scenario(parse_scenario(dump_scenario(scenario))) == dump_scenario(scenario)


def test_too_many_tzasc_regions_is_a_parse_error():
    regions = [{"base": i * 8, "count": 8, "secure": i % 2 == 0} for i in range(9)]
    with pytest.raises(ParseError) as info:
        parse_scenario(scenario_text(granules=128, tzasc=regions))
    assert "memory.tzasc" in info.value.field
    assert info.value.line is not None


def test_overlapping_tzasc_regions_are_rejected():
    regions = [{"base": 0, "count": 16, "secure": True}, {"base": 8, "count": 16, "secure": False}]
    with pytest.raises(ParseError) as info:
        parse_scenario(scenario_text(granules=64, tzasc=regions))
    assert info.value.field.startswith("memory")


def test_malformed_json_reports_the_line():
    with pytest.raises(ParseError) as info:
        parse_scenario('{\n  "name": "x",\n  "cvms": [,]\n}')
    assert info.value.line == 3


def test_unknown_instruction_is_rejected():
    doc = {"cvms": [{"name": "m", "tecs": [{"program": [{"op": "jump"}]}]}]}
    with pytest.raises(ParseError) as info:
        parse_scenario(json.dumps(doc))
    assert info.value.field.startswith("cvms.0.tecs.0.program")


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "absent.json")


def test_overrides_replace_seed_and_policy():
    scenario = load_scenario(DEMO).with_overrides(seed=11, policy=MappingPolicy.DYNAMIC)
    assert scenario.seed == 11
    assert scenario.memory.policy is MappingPolicy.DYNAMIC
    assert scenario.memory.granules == 4096


# ─── Scenario runs ───────────────────────────────────────────────────────────
@pytest.mark.parametrize("policy", [None, MappingPolicy.DYNAMIC])
def test_demo_scenario_passes(policy):
    report = run_scenario(DEMO, policy=policy)
    assert report.passed, [c.detail for c in report.cases]
    assert [c.outcome for c in report.cases] == [PASS]
    assert report.counters["integrity_failures"] == 0
    out = cli_settings.work_dir / "demo"
    token = (out / "guest.token").read_bytes()
    rak = bytes.fromhex((out / "rak.pub").read_text().strip())
    assert verify_token(token, rak, challenge=bytes(range(64)))
    assert verify_attestation(out / "guest.token", out / "rak.pub", challenge=bytes(range(64)).hex()).passed
    assert not verify_attestation(out / "guest.token", out / "rak.pub", challenge="00" * 64).passed


def test_recorded_trace_replays_identically(tmp_path):
    trace = tmp_path / "demo.jsonl"
    report = run_scenario(DEMO, trace_path=trace)
    assert report.passed
    result = replay_trace(trace)
    assert result.commands == report.summary["tmi_records"] > 0
    assert result.identical, result.mismatches[:3]


def test_replay_needs_a_config_record():
    with pytest.raises(ScenarioError):
        replay_trace([{"event": "tmi", "command": "CREATE_CVM", "args": [0, 1]}])


# ─── Conformance cases ───────────────────────────────────────────────────────
def test_every_category_has_cases():
    assert {c.category for c in CASES} == set(CATEGORIES)
    assert len({c.id for c in CASES}) == len(CASES)
    assert all(c.category == "race" for c in select("race"))
    assert [c.id for c in select("ttt-block-mapping")] == ["ttt-block-mapping"]


def test_full_conformance_run_passes_and_covers_every_call():
    report = run_conformance()
    failed = [(c.id, c.detail) for c in report.cases if c.outcome == FAIL]
    assert not failed
    assert report.passed, report.errors
    assert report.coverage["tmi_missing"] == []
    assert report.coverage["tsi_missing"] == []
    assert {c.id for c in report.cases if c.outcome == SKIP} == {c.id for c in select("race")}


def test_race_cases_run_with_several_cpus():
    report = run_conformance("race", parallel_cpus=2)
    assert [c.outcome for c in report.cases] == [PASS] * len(select("race"))


def test_unknown_filter_is_an_error():
    report = run_conformance("no-such-case")
    assert not report.passed
    assert report.cases == []


# ─── Benches ─────────────────────────────────────────────────────────────────
def test_bench_report():
    report = run_bench("all")
    assert report.passed
    assert set(report.bench) == {"hvc", "ipi", "io", "memcpy"}
    assert report.bench["ipi"][0]["model_us"] == pytest.approx(314.0)
    with pytest.raises(ScenarioError):
        bench_table("nope")


# ─── Command line ────────────────────────────────────────────────────────────
def test_cli_exit_codes(tmp_path):
    report_path = tmp_path / "cli.json"
    assert orchestrator.main(["--report", str(report_path), "bench", "hvc"]) == 0
    written = json.loads(report_path.read_text())
    assert written["metadata"]["kind"] == "bench" and written["passed"]

    assert orchestrator.main(["conformance", "--filter", "input-sanity"]) == 0
    assert orchestrator.main(["conformance", "--filter", "no-such-case"]) == 1

    bad = tmp_path / "bad.json"
    bad.write_text(scenario_text(granules=64, tzasc=[{"base": 0, "count": 99, "secure": True}]))
    assert orchestrator.main(["run", str(bad)]) == 2


def test_cli_run_replay_and_verify(tmp_path):
    trace = tmp_path / "run.jsonl"
    assert orchestrator.main(["--trace", str(trace), "run", str(DEMO)]) == 0
    assert orchestrator.main(["replay", str(trace)]) == 0
    out = cli_settings.work_dir / "demo"
    token, rak = str(out / "guest.token"), str(out / "rak.pub")
    assert orchestrator.main(["attest", "verify", token, rak, "--challenge", bytes(range(64)).hex()]) == 0
    assert orchestrator.main(["attest", "verify", token, rak, "--measurement", "00" * 32]) == 1
    assert orchestrator.main(["attest", "verify", str(tmp_path / "missing"), rak]) == 1
