# tzcvm_sim/tmm_core/trace.py
"""
JSON-lines command trace.

One record per TMI (`seq, cpu, command, args, status, results`) plus the
host-side events a replay needs to rebuild the same platform state: NS
writes, delegation calls, physical interrupt assertions and sync requests.
"""
from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

logger = logging.getLogger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, "name") and hasattr(value, "value"):     # enums
        return value.name
    return value


class TraceWriter:
    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.records: List[Dict[str, Any]] = []
        self._seq = 0
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def _append(self, record: Dict[str, Any]) -> Dict[str, Any]:
        with self._lock:
            record = {"seq": self._seq, **{k: _jsonable(v) for k, v in record.items()}}
            self._seq += 1
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def config(self, **header: Any) -> None:
        self._append({"event": "config", **header})

    def tmi(self, cpu: int, command: str, args: Iterable[int], status: str,
            results: Iterable[int], exit: Optional[Dict[str, Any]] = None) -> None:
        record: Dict[str, Any] = {
            "event": "tmi", "cpu": cpu, "command": command,
            "args": list(args), "status": status, "results": list(results),
        }
        if exit is not None:
            record["exit"] = exit
        self._append(record)

    def event(self, kind: str, **fields: Any) -> None:
        self._append({"event": kind, **fields})

    def lines(self) -> List[str]:
        with self._lock:
            return [json.dumps(r, sort_keys=True) for r in self.records]

    def responses(self) -> List[Dict[str, Any]]:
        """The response stream: what replay has to reproduce."""
        return [
            {k: r[k] for k in ("command", "status", "results", "exit") if k in r}
            for r in self.records if r["event"] == "tmi"
        ]

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")
        logger.info("TMI trace written to %s (%d records)", path, len(self.records))

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_trace(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
