# tzcvm_sim/shadow_sync/cost_model.py
"""
Calibrated latency model for host↔cVM memory transfers and world switches.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mem_model.granules import MappingPolicy

from .config import (
    HVC_RESIDUAL_US,
    HVC_STEPS,
    LR_WRITE_US,
    REFERENCE_MICRO,
    CalibrationSample,
    LatencyConstants,
    reference_samples,
    settings,
)
from .errors import DegenerateFit, Uncalibrated

logger = logging.getLogger(__name__)


# ─── Memcpy model ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class MemcpyModel:
    """
    Copy cost is piecewise linear through the calibration knots and follows
    the global least-squares line outside them; dynamic mapping adds one
    constant overhead per transfer.
    """
    knots_size: Tuple[float, ...]
    knots_us: Tuple[float, ...]
    slope: float                    # global least-squares µs per byte
    intercept: float                # global least-squares µs
    dynamic_overhead: float         # µs per dynamic transfer

    def copy_cost(self, size: int) -> float:
        if size <= 0:
            return 0.0
        lo, hi = self.knots_size[0], self.knots_size[-1]
        if lo <= size <= hi:
            return float(np.interp(size, self.knots_size, self.knots_us))
        # outside the knots: keep the nearest knot value and continue with the global slope
        anchor_size, anchor_us = (lo, self.knots_us[0]) if size < lo else (hi, self.knots_us[-1])
        return max(0.0, anchor_us + self.slope * (size - anchor_size))

    def latency(self, size: int, policy: MappingPolicy) -> float:
        direct = self.copy_cost(size)
        if MappingPolicy(policy) is MappingPolicy.DYNAMIC:
            return direct + self.dynamic_overhead
        return direct

    def constants(self, base: Optional[LatencyConstants] = None) -> LatencyConstants:
        return (base or LatencyConstants()).with_dynamic_overhead(self.dynamic_overhead)


def calibrate(samples: Sequence[CalibrationSample]) -> MemcpyModel:
    """Fit the copy curve and the single dynamic overhead constant."""
    rows = sorted(samples, key=lambda s: s.size)
    sizes = np.array([s.size for s in rows], dtype=float)
    if len(np.unique(sizes)) < 2:
        raise DegenerateFit("calibration needs at least two distinct sizes")
    direct = np.array([s.direct_us for s in rows], dtype=float)
    dynamic = np.array([s.dynamic_us for s in rows], dtype=float)

    slope, intercept = np.polyfit(sizes, direct, 1)
    # least-squares constant offset between the two series
    overhead = float(np.mean(dynamic - direct))

    # duplicate sizes collapse to their mean so interpolation stays monotone in x
    uniq = np.unique(sizes)
    knots_us = np.array([direct[sizes == s].mean() for s in uniq])
    model = MemcpyModel(
        knots_size=tuple(float(s) for s in uniq),
        knots_us=tuple(float(v) for v in knots_us),
        slope=float(slope),
        intercept=float(intercept),
        dynamic_overhead=max(0.0, overhead),
    )
    logger.info(
        "Calibrated memcpy model: slope=%.5f µs/B intercept=%.3f µs overhead=%.3f µs",
        model.slope, model.intercept, model.dynamic_overhead,
    )
    return model


_model: Optional[MemcpyModel] = None


def load_model(model: Optional[MemcpyModel] = None) -> MemcpyModel:
    """Install `model` (or the reference fit) as the process-wide calibration."""
    global _model
    _model = model or calibrate(reference_samples())
    return _model


def reset_model() -> None:
    global _model
    _model = None


def current_model() -> MemcpyModel:
    if _model is None:
        if settings.calibrate_on_start:
            return load_model()
        raise Uncalibrated("memcpy model has not been calibrated")
    return _model


def simulate_memcpy_latency(size: int, policy: MappingPolicy, model: Optional[MemcpyModel] = None) -> float:
    return (model or current_model()).latency(size, policy)


# ─── World-switch decomposition ──────────────────────────────────────────────
@dataclass(frozen=True)
class HvcBreakdown:
    steps: Tuple[Tuple[str, float], ...]
    residual: float
    total: float
    round_trip: float               # steps ② … ⑧
    vanilla: float

    def as_rows(self) -> List[Dict[str, object]]:
        rows = [{"step": i + 1, "description": d, "us": us} for i, (d, us) in enumerate(self.steps)]
        rows.append({"step": "residual", "description": "timer state, error checking", "us": self.residual})
        return rows


def simulate_hvc_latency() -> HvcBreakdown:
    steps = tuple(HVC_STEPS)
    round_trip = sum(us for _, us in steps[1:8])
    total = sum(us for _, us in steps) + HVC_RESIDUAL_US
    return HvcBreakdown(
        steps=steps,
        residual=HVC_RESIDUAL_US,
        total=total,
        round_trip=round_trip,
        vanilla=REFERENCE_MICRO["hvc"][0],
    )


def interrupt_round_trip_us() -> float:
    """One interrupt-emulation round trip: every step of an exit/enter plus the LR write."""
    return sum(us for _, us in HVC_STEPS) + LR_WRITE_US


def simulate_ipi_latency(round_trips: int) -> float:
    return round_trips * interrupt_round_trip_us()


def simulate_io_latency(vring_bytes: int, policy: MappingPolicy,
                        constants: Optional[LatencyConstants] = None,
                        model: Optional[MemcpyModel] = None) -> float:
    """HVC round trip + vring sync out and back + host device-model work."""
    constants = constants or LatencyConstants()
    sync = 2 * simulate_memcpy_latency(vring_bytes, policy, model)
    return simulate_hvc_latency().total + sync + constants.io_device_model
