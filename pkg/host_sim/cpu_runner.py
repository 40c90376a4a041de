# tzcvm_sim/host_sim/cpu_runner.py

import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence

from tmm_core.monitor import Monitor
from tmm_core.types import TmiRequest, TmiResponse

logger = logging.getLogger(__name__)

Work = Callable[["SimulatedCpu"], None]


# ─── Simulated CPU thread ────────────────────────────────────────────────────
class SimulatedCpu(threading.Thread):
    """
    One physical CPU issuing TMIs. All CPUs share the monitor, whose
    dispatcher gate serializes them; a start barrier lines them up so their
    requests interleave.
    """

    def __init__(
        self,
        cpu: int,
        monitor: Monitor,
        requests: Sequence[TmiRequest] = (),
        work: Optional[Work] = None,
        barrier: Optional[threading.Barrier] = None,
    ):
        super().__init__(name=f"cpu{cpu}")
        self.cpu = cpu
        self.monitor = monitor
        self.requests = list(requests)
        self.work = work
        self.barrier = barrier
        self.responses: List[TmiResponse] = []
        self.error: Optional[BaseException] = None
        self.stop_event = threading.Event()
        self.daemon = True

    def dispatch(self, request: TmiRequest) -> TmiResponse:
        response = self.monitor.dispatch(request, cpu=self.cpu)
        self.responses.append(response)
        return response

    def run(self) -> None:
        logger.debug("[cpu%d] starting with %d request(s)", self.cpu, len(self.requests))
        try:
            if self.barrier is not None:
                self.barrier.wait()
            for request in self.requests:
                if self.stop_event.is_set():
                    break
                self.dispatch(request)
            if self.work is not None and not self.stop_event.is_set():
                self.work(self)
        except Exception as exc:
            logger.exception("[cpu%d] failed", self.cpu)
            self.error = exc
        logger.debug("[cpu%d] stopped after %d response(s)", self.cpu, len(self.responses))

    def stop(self) -> None:
        self.stop_event.set()


# ─── CPU pool ────────────────────────────────────────────────────────────────
class CpuPool:
    """Starts a set of SimulatedCpu threads together and collects their responses."""

    def __init__(self, monitor: Monitor, timeout: float = 30.0):
        self.monitor = monitor
        self.timeout = timeout
        self.cpus: Dict[int, SimulatedCpu] = {}
        self.lock = threading.Lock()

    def run(self, per_cpu: Sequence[Sequence[TmiRequest]] = (), work: Sequence[Work] = ()) -> List[List[TmiResponse]]:
        count = max(len(per_cpu), len(work))
        barrier = threading.Barrier(count)
        with self.lock:
            self.cpus = {
                cpu: SimulatedCpu(
                    cpu, self.monitor,
                    per_cpu[cpu] if cpu < len(per_cpu) else (),
                    work[cpu] if cpu < len(work) else None,
                    barrier,
                )
                for cpu in range(count)
            }
            for runner in self.cpus.values():
                runner.start()
            for runner in self.cpus.values():
                runner.join(timeout=self.timeout)
                if runner.is_alive():
                    logger.error("[cpu%d] did not finish within %.1fs", runner.cpu, self.timeout)
                    runner.stop()
        errors = [r.error for r in self.cpus.values() if r.error is not None]
        if errors:
            raise errors[0]
        return [self.cpus[cpu].responses for cpu in range(count)]

    def stop_all(self) -> None:
        with self.lock:
            for runner in self.cpus.values():
                runner.stop()
                runner.join(timeout=5)
