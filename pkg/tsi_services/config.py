# tzcvm_sim/tsi_services/config.py

from __future__ import annotations

from enum import IntEnum

TSI_VERSION = (1, 0)
REM_INDEX_RANGE = range(1, 5)      # 0 is the initial measurement
MEASUREMENT_INDEX_MAX = 4


class TsiStatus(IntEnum):
    SUCCESS = 0
    ERROR_INPUT = 1
    ERROR_STATE = 2
    INCOMPLETE = 3


TSI_FUNCTIONS = (
    "version",
    "cvm_config",
    "measurement_read",
    "measurement_extend",
    "attestation_token_init",
    "attestation_token_continue",
    "host_call",
)
