# tzcvm_sim/conformance_cli/scenario.py
"""
Scenario files: a JSON document describing one simulated platform and the
cVMs the host boots and runs on it.

    {
      "name": "demo", "seed": 7,
      "memory":   {"granules": 4096, "policy": "direct", "tzasc": [...]},
      "platform": {"firmware_digest": "..."},
      "host":     {"quantum": 200, "injection": "faithful"},
      "cvms": [{
          "name": "guest",
          "params": {"ipa_width": 40, "protected_ipa_limit": 549755813888},
          "image": [{"ipa": 0, "text": "hello"}],
          "tecs": [{"program": [{"op": "compute", "ticks": 10}, {"op": "halt"}]}],
          "io": {"ipa": 1048576},
          "responder": [{"function": 1, "results": [42]}],
          "interrupts": [{"at_step": 3, "intid": 27, "vcpu": 0}],
          "attest": {"challenge": "..."},
          "expect": {"final_state": "NULL", "trace_contains": [...]}
      }]
    }

Every record is a pydantic model, so a file round-trips losslessly through
`dump_scenario` / `parse_scenario`.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from host_sim.config import HostPolicy, InjectionMode
from host_sim.config import settings as host_settings
from host_sim.guest import GuestProgram, Instruction
from mem_model.config import GRANULE_SIZE, MAX_TZASC_REGIONS
from mem_model.config import settings as mem_settings
from mem_model.granules import MappingPolicy, TzascConfig, TzascRegion
from tmm_core.types import CVmParams, CVmState, TecParams

from .errors import ParseError

logger = logging.getLogger(__name__)


def _hex(v: str) -> str:
    try:
        bytes.fromhex(v)
    except ValueError as exc:
        raise ValueError(f"not a hex string: {v!r}") from exc
    return v.lower()


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ─── Platform ────────────────────────────────────────────────────────────────
class TzascEntry(_Spec):
    base: int = Field(..., ge=0)
    count: int = Field(..., gt=0)
    secure: bool


class MemorySpec(_Spec):
    granules: int = Field(default_factory=lambda: mem_settings.granules, ge=16)
    policy: MappingPolicy = MappingPolicy(mem_settings.policy)
    tzasc: Optional[List[TzascEntry]] = Field(None, max_length=MAX_TZASC_REGIONS)

    @model_validator(mode="after")
    def _tzasc_fits(self) -> "MemorySpec":
        if self.tzasc is not None:
            self.tzasc_config().checked(self.granules)      # TzascError is a ValueError
        return self

    def tzasc_config(self) -> Optional[TzascConfig]:
        if self.tzasc is None:
            return None
        return TzascConfig(tuple(TzascRegion(e.base, e.count, e.secure) for e in self.tzasc))


class PlatformSpec(_Spec):
    rot_seed: Optional[str] = Field(None, description="hex; derived from the scenario seed when absent")
    firmware_digest: Optional[str] = None
    platform_info: Optional[str] = None
    features: Optional[int] = Field(None, ge=0)

    @field_validator("rot_seed", "firmware_digest")
    @classmethod
    def _digest(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and len(bytes.fromhex(_hex(v))) != 32:
            raise ValueError("expected 32 bytes of hex")
        return v


class HostSpec(_Spec):
    quantum: int = Field(default_factory=lambda: host_settings.quantum, ge=1)
    max_steps: int = Field(default_factory=lambda: host_settings.max_steps, ge=1)
    injection: InjectionMode = InjectionMode.FAITHFUL
    drop_intids: List[int] = Field(default_factory=list)
    fault_in_protected: bool = True

    def policy(self, mapping: MappingPolicy) -> HostPolicy:
        return HostPolicy(
            quantum=self.quantum,
            mapping_policy=mapping,
            injection=self.injection,
            drop_intids=frozenset(self.drop_intids),
            fault_in_protected=self.fault_in_protected,
        )


# ─── cVM definitions ─────────────────────────────────────────────────────────
class ParamsSpec(_Spec):
    ipa_width: int = 40
    protected_ipa_limit: int = 1 << 39
    hash_algo: int = 0
    feature_mask: int = 0


class ImageEntry(_Spec):
    """One image chunk: `data` (hex), `text` (UTF-8) or `fill` bytes over `pages` pages."""
    ipa: int = Field(..., ge=0)
    data: Optional[str] = None
    text: Optional[str] = None
    fill: Optional[int] = Field(None, ge=0, le=255)
    pages: int = Field(1, ge=1, le=4096)

    @field_validator("ipa")
    @classmethod
    def _aligned(cls, v: int) -> int:
        if v % GRANULE_SIZE:
            raise ValueError("image entries start on a page boundary")
        return v

    @field_validator("data")
    @classmethod
    def _data_hex(cls, v: Optional[str]) -> Optional[str]:
        return _hex(v) if v is not None else None

    @model_validator(mode="after")
    def _one_source(self) -> "ImageEntry":
        if sum(x is not None for x in (self.data, self.text, self.fill)) != 1:
            raise ValueError("exactly one of data, text or fill is required")
        return self

    def content(self) -> bytes:
        if self.data is not None:
            return bytes.fromhex(self.data)
        if self.text is not None:
            return self.text.encode()
        return bytes([self.fill]) * (self.pages * GRANULE_SIZE)


class TecSpec(_Spec):
    entry_pc: int = Field(0, ge=0)
    gprs: List[int] = Field(default_factory=list, max_length=8)
    program: List[Instruction] = Field(default_factory=list)

    def to_params(self) -> TecParams:
        gprs = tuple(self.gprs) + (0,) * (8 - len(self.gprs))
        return TecParams(entry_pc=self.entry_pc, gprs=gprs, program=GuestProgram(instructions=self.program))


class IoSpec(_Spec):
    ipa: int = Field(..., ge=0)
    pages: Optional[int] = Field(None, ge=1)
    queue_size: Optional[int] = Field(None, ge=2, le=1024)
    protect: List[int] = Field(default_factory=list, description="IPAs of I/O pages to encrypt in the shadow")

    @field_validator("queue_size")
    @classmethod
    def _power_of_two(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v & (v - 1):
            raise ValueError("queue_size must be a power of two")
        return v


class ResponderEntry(_Spec):
    function: int = Field(..., ge=0)
    results: List[int] = Field(default_factory=list, max_length=4)


class InterruptSpec(_Spec):
    at_step: int = Field(0, ge=0)
    intid: int = Field(..., ge=0, lt=1020)
    vcpu: int = Field(0, ge=0)


class AttestSpec(_Spec):
    """Reassemble the token a vCPU retrieved and verify it against the platform root key."""
    challenge: str
    vcpu: int = Field(0, ge=0)
    expect_accept: bool = True

    @field_validator("challenge")
    @classmethod
    def _challenge(cls, v: str) -> str:
        if len(bytes.fromhex(_hex(v))) != 64:
            raise ValueError("challenge must be 64 bytes of hex")
        return v.lower()


class TraceExpectation(_Spec):
    vcpu: int = Field(0, ge=0)
    entry: Dict[str, Any]


class ExpectSpec(_Spec):
    final_state: Optional[CVmState] = None
    deadlock: Optional[bool] = None
    trace_contains: List[TraceExpectation] = Field(default_factory=list)
    counters_zero: List[str] = Field(default_factory=list)
    blk_contains: Optional[Tuple[int, str]] = Field(None, description="(sector, hex) expected in the blk image")


class CVmSpec(_Spec):
    name: str
    params: ParamsSpec = Field(default_factory=ParamsSpec)
    vcpus: Optional[int] = Field(None, ge=1)
    image: List[ImageEntry] = Field(default_factory=list)
    tecs: List[TecSpec] = Field(..., min_length=1)
    io: Optional[IoSpec] = None
    responder: List[ResponderEntry] = Field(default_factory=list)
    interrupts: List[InterruptSpec] = Field(default_factory=list)
    attest: Optional[AttestSpec] = None
    expect: ExpectSpec = Field(default_factory=ExpectSpec)

    @model_validator(mode="after")
    def _vcpus(self) -> "CVmSpec":
        if self.vcpus is not None and self.vcpus < len(self.tecs):
            raise ValueError(f"{len(self.tecs)} TEC programs for {self.vcpus} vCPUs")
        return self

    def cvm_params(self) -> CVmParams:
        return CVmParams(vcpu_count=self.vcpus or len(self.tecs), **self.params.model_dump())

    def image_pages(self) -> List[Tuple[int, bytes]]:
        return [(e.ipa, e.content()) for e in self.image]

    def responder_table(self) -> Dict[int, Tuple[int, ...]]:
        return {r.function: tuple(r.results) for r in self.responder}

    def interrupt_schedule(self) -> List[Tuple[int, int, int]]:
        return [(i.at_step, i.intid, i.vcpu) for i in self.interrupts]


class Scenario(_Spec):
    version: int = Field(1, ge=1, le=1)
    name: str = "scenario"
    seed: int = Field(0, ge=0)
    memory: MemorySpec = Field(default_factory=MemorySpec)
    platform: PlatformSpec = Field(default_factory=PlatformSpec)
    host: HostSpec = Field(default_factory=HostSpec)
    cvms: List[CVmSpec] = Field(..., min_length=1)

    def with_overrides(self, seed: Optional[int] = None, policy: Optional[MappingPolicy] = None) -> "Scenario":
        update: Dict[str, Any] = {}
        if seed is not None:
            update["seed"] = seed
        if policy is not None:
            update["memory"] = self.memory.model_copy(update={"policy": MappingPolicy(policy)})
        return self.model_copy(update=update)


# ─── Parsing ─────────────────────────────────────────────────────────────────
def _line_of(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """Best-effort line of the innermost key of `loc` in the JSON text."""
    pos, found = 0, False
    for part in loc:
        if not isinstance(part, str):
            continue
        at = text.find(f'"{part}"', pos)
        if at < 0:
            break
        pos, found = at, True
    return text.count("\n", 0, pos) + 1 if found else None


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: {exc.msg}", line=exc.lineno) from exc
    try:
        return Scenario.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = first.get("loc", ())
        field = ".".join(str(p) for p in loc) or None
        raise ParseError(f"{source}: {first.get('msg', 'invalid value')}", line=_line_of(text, loc),
                         field=field) from exc


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    scenario = parse_scenario(text, str(path))
    logger.info("Loaded scenario %r from %s (%d cVM(s))", scenario.name, path, len(scenario.cvms))
    return scenario


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario.model_dump(mode="json"), indent=2)
