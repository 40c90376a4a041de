# tzcvm_sim/tsi_services/services.py
"""
The seven guest-facing services of the monitor.

Calls arrive from the interpreter while a TEC runs. Results go into the
guest's registers (x0 = status, x1.. = results) and the guest trace; the
host only ever sees a host_call, through the HOST_CALL exit.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

from attestation.config import CHALLENGE_SIZE
from attestation.errors import NotActive
from attestation.token import build_token
from host_sim.guest import TsiCall, words_from_bytes
from tmm_core.cvm import CVmDescriptor
from tmm_core.interpreter import GuestAbort, GuestMemory
from tmm_core.tec import Tec
from tmm_core.types import U64

from .config import MEASUREMENT_INDEX_MAX, REM_INDEX_RANGE, TSI_VERSION, TsiStatus

if TYPE_CHECKING:
    from tmm_core.monitor import Monitor

logger = logging.getLogger(__name__)


@dataclass
class TokenRetrieval:
    challenge: bytes
    token_bytes: bytes
    cursor: int = 0

    @property
    def in_flight(self) -> bool:
        return 0 < self.cursor < len(self.token_bytes)

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.token_bytes)


@dataclass(frozen=True)
class TsiRequest:
    function: str
    args: Tuple[int, ...] = ()
    data: bytes = b""

    def arg(self, i: int) -> int:
        return self.args[i] if i < len(self.args) else 0


@dataclass(frozen=True)
class TsiResponse:
    status: TsiStatus
    results: Tuple[int, ...] = ()
    data: bytes = b""
    host_call: Optional[Tuple[int, ...]] = None


def _ok(*results: int, data: bytes = b"") -> TsiResponse:
    return TsiResponse(TsiStatus.SUCCESS, tuple(results), data)


def _fail(status: TsiStatus) -> TsiResponse:
    return TsiResponse(status)


class TsiServices:
    def __init__(self, monitor: "Monitor"):
        self.monitor = monitor
        self.calls: Counter = Counter()

    def handle(self, cvm: CVmDescriptor, tec: Tec, instr: TsiCall, mem: GuestMemory) -> TsiResponse:
        request = TsiRequest(instr.function, tuple(a & U64 for a in instr.args), bytes.fromhex(instr.data))
        self.calls[request.function] += 1
        response: TsiResponse = getattr(self, f"_{request.function}")(cvm, tec, request, mem)
        if response.host_call is not None:
            return response
        tec.gprs[0] = int(response.status)
        tec.gprs[1:1 + len(response.results)] = list(response.results)
        entry = {"tsi": request.function, "status": response.status.name, "results": list(response.results)}
        if response.data:
            entry["data"] = response.data.hex()
        tec.trace.append(entry)
        logger.debug("TSI %s from TEC %d -> %s", request.function, tec.tec_id, response.status.name)
        return response

    # ── Services ────────────────────────────────────────────────────────────
    def _version(self, cvm, tec, request, mem) -> TsiResponse:
        return _ok(*TSI_VERSION)

    def _cvm_config(self, cvm: CVmDescriptor, tec, request, mem) -> TsiResponse:
        p = cvm.params
        return _ok(p.ipa_width, p.vcpu_count, p.protected_ipa_limit, p.hash_algo, p.feature_mask)

    def _measurement_read(self, cvm: CVmDescriptor, tec, request, mem) -> TsiResponse:
        index = request.arg(0)
        if index > MEASUREMENT_INDEX_MAX:
            return _fail(TsiStatus.ERROR_INPUT)
        digest = cvm.initial_measurement if index == 0 else cvm.rem.slots[index - 1]
        return _ok(*words_from_bytes(digest, 4), data=digest)

    def _measurement_extend(self, cvm: CVmDescriptor, tec, request, mem) -> TsiResponse:
        index = request.arg(0)
        if index not in REM_INDEX_RANGE:
            return _fail(TsiStatus.ERROR_INPUT)
        value = request.data or b"".join(a.to_bytes(8, "little") for a in request.args[1:])
        cvm.rem.extend(index - 1, value)
        return _ok()

    def _attestation_token_init(self, cvm: CVmDescriptor, tec: Tec, request, mem) -> TsiResponse:
        if len(request.data) != CHALLENGE_SIZE:
            return _fail(TsiStatus.ERROR_INPUT)
        current: Optional[TokenRetrieval] = tec.token_retrieval
        if current is not None and current.in_flight:
            return _fail(TsiStatus.ERROR_STATE)
        try:
            token = build_token(self.monitor, cvm.cvm_id, request.data).encode()
        except NotActive:
            return _fail(TsiStatus.ERROR_STATE)
        tec.token_retrieval = TokenRetrieval(request.data, token)
        return _ok(len(token))

    def _attestation_token_continue(self, cvm, tec: Tec, request, mem: GuestMemory) -> TsiResponse:
        retrieval: Optional[TokenRetrieval] = tec.token_retrieval
        if retrieval is None:
            return _fail(TsiStatus.ERROR_STATE)
        buffer_ipa, max_len = request.arg(0), request.arg(1)
        if buffer_ipa == 0 and max_len == 0:
            tec.token_retrieval = None      # abandon
            return _ok(0)
        chunk = retrieval.token_bytes[retrieval.cursor:retrieval.cursor + max_len]
        if chunk:
            try:
                mem.write(buffer_ipa, chunk)
            except GuestAbort:
                return _fail(TsiStatus.ERROR_INPUT)
        retrieval.cursor += len(chunk)
        status = TsiStatus.SUCCESS if retrieval.done else TsiStatus.INCOMPLETE
        return TsiResponse(status, (len(chunk),), chunk)

    def _host_call(self, cvm, tec, request: TsiRequest, mem) -> TsiResponse:
        return TsiResponse(TsiStatus.SUCCESS, host_call=request.args[:7])
