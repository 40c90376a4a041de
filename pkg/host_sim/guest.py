# tzcvm_sim/host_sim/guest.py
"""
Scripted guest programs standing in for a real guest OS.

A program is an ordered list of instructions interpreted by the monitor
inside tec_enter. Programs are pydantic models so they can be loaded from
scenario files and hashed through one canonical JSON encoding.
"""
from __future__ import annotations

import json
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator


class _Instr(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _hex(v: str) -> str:
    try:
        bytes.fromhex(v)
    except ValueError as exc:
        raise ValueError(f"not a hex string: {v!r}") from exc
    return v.lower()


class ComputeTicks(_Instr):
    op: Literal["compute"] = "compute"
    ticks: int = Field(..., ge=1)


class MemWrite(_Instr):
    op: Literal["mem_write"] = "mem_write"
    ipa: int = Field(..., ge=0)
    data: str = Field(..., description="hex bytes, must stay inside one page")

    @field_validator("data")
    @classmethod
    def _data_hex(cls, v: str) -> str:
        return _hex(v)


class MemRead(_Instr):
    op: Literal["mem_read"] = "mem_read"
    ipa: int = Field(..., ge=0)
    length: int = Field(..., ge=1, le=4096)


class TsiCall(_Instr):
    op: Literal["tsi"] = "tsi"
    function: Literal[
        "version", "cvm_config", "measurement_read", "measurement_extend",
        "attestation_token_init", "attestation_token_continue", "host_call",
    ]
    args: List[int] = Field(default_factory=list, max_length=7)
    data: str = ""

    @field_validator("data")
    @classmethod
    def _data_hex(cls, v: str) -> str:
        return _hex(v)


class HostCall(_Instr):
    op: Literal["host_call"] = "host_call"
    args: List[int] = Field(default_factory=list, max_length=7)


class MmioRead(_Instr):
    op: Literal["mmio_read"] = "mmio_read"
    ipa: int = Field(..., ge=0)


class MmioWrite(_Instr):
    op: Literal["mmio_write"] = "mmio_write"
    ipa: int = Field(..., ge=0)
    value: int = Field(..., ge=0, lt=1 << 64)


class Descriptor(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    ipa: int = Field(..., ge=0)
    length: int = Field(..., ge=1, le=1 << 16)
    device_writes: bool = False


class VirtioSubmit(_Instr):
    op: Literal["virtio_submit"] = "virtio_submit"
    device: Literal["blk", "net"]
    queue: int = Field(0, ge=0, le=1)
    descriptors: List[Descriptor] = Field(..., min_length=1)


class Wfi(_Instr):
    op: Literal["wfi"] = "wfi"


class PsciCall(_Instr):
    op: Literal["psci"] = "psci"
    function: Literal["cpu_on", "cpu_off", "system_off"]
    target: int = Field(0, ge=0)
    entry: int = Field(0, ge=0, description="program counter the target starts at (cpu_on)")


class Halt(_Instr):
    op: Literal["halt"] = "halt"


Instruction = Annotated[
    Union[
        ComputeTicks, MemWrite, MemRead, TsiCall, HostCall, MmioRead, MmioWrite,
        VirtioSubmit, Wfi, PsciCall, Halt,
    ],
    Field(discriminator="op"),
]


class GuestProgram(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    instructions: List[Instruction] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, pc: int) -> Instruction:
        return self.instructions[pc]

    def canonical(self) -> bytes:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_canonical(cls, raw: bytes) -> "GuestProgram":
        return cls.model_validate_json(raw)

    @classmethod
    def of(cls, *instructions: Instruction) -> "GuestProgram":
        return cls(instructions=list(instructions))


def words_from_bytes(data: bytes, words: Optional[int] = None) -> List[int]:
    """Little-endian 64-bit register words holding `data` (zero padded)."""
    count = words if words is not None else (len(data) + 7) // 8
    padded = data.ljust(count * 8, b"\0")
    return [int.from_bytes(padded[i * 8:(i + 1) * 8], "little") for i in range(count)]
