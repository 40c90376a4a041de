import os

import pytest
from hypothesis import HealthCheck, settings

from conformance_cli.config import settings as cli_settings
from conformance_cli.simulation import Simulation
from mem_model.granules import MappingPolicy

# The scratch-directory fixture below is autouse, so every @given test sees a function-scoped fixture.
settings.register_profile(
    "tzcvm",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
# Full-scale property runs: TZCVM_HYPOTHESIS_PROFILE=acceptance pytest
settings.register_profile("acceptance", settings.get_profile("tzcvm"), max_examples=100_000)
settings.load_profile(os.environ.get("TZCVM_HYPOTHESIS_PROFILE", "tzcvm"))


@pytest.fixture(autouse=True)
def _scratch(tmp_path, monkeypatch):
    """Keep reports, blk images and traces out of the working tree."""
    monkeypatch.setattr(cli_settings, "work_dir", tmp_path / "work")
    monkeypatch.setattr(cli_settings, "report_path", tmp_path / "report.json")
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def sim(tmp_path):
    return Simulation.build(seed=3, blk_dir=tmp_path / "blk")


@pytest.fixture
def dynamic_sim(tmp_path):
    return Simulation.build(policy=MappingPolicy.DYNAMIC, seed=3, blk_dir=tmp_path / "blk")
