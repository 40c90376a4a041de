# tzcvm_sim/conformance_cli/report.py

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from tabulate import tabulate

from .config import REPORT_VERSION

logger = logging.getLogger(__name__)

PASS, FAIL, SKIP = "pass", "fail", "skip"


@dataclass
class CaseResult:
    id: str
    category: str
    outcome: str
    detail: str = ""
    seconds: float = 0.0
    counters: Dict[str, int] = field(default_factory=dict)


@dataclass
class Report:
    """Machine-readable outcome of one CLI command."""
    kind: str
    cases: List[CaseResult] = field(default_factory=list)
    coverage: Dict[str, Any] = field(default_factory=dict)
    bench: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)
    events: List[Dict[str, Any]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and all(c.outcome != FAIL for c in self.cases)

    def add_table(self, name: str, table: pd.DataFrame) -> None:
        self.bench[name] = table.to_dict(orient="records")

    def tally(self) -> Dict[str, int]:
        counts = {PASS: 0, FAIL: 0, SKIP: 0}
        for case in self.cases:
            counts[case.outcome] += 1
        return counts

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metadata": {
                "tool": "tzcvm-sim",
                "report_version": REPORT_VERSION,
                "kind": self.kind,
                "generated_at": datetime.now(timezone.utc).isoformat(),
            },
            "passed": self.passed,
            "tally": self.tally(),
            "cases": [asdict(c) for c in self.cases],
            "coverage": self.coverage,
            "bench": self.bench,
            "summary": self.summary,
            "counters": self.counters,
            "events": self.events,
            "errors": self.errors,
        }

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=str), encoding="utf-8")
        logger.info("Report written to %s", path)
        return path


def render_cases(report: Report) -> str:
    rows = [{"case": c.id, "category": c.category, "outcome": c.outcome, "detail": c.detail[:70]}
            for c in report.cases]
    return tabulate(rows, headers="keys", tablefmt="github") if rows else "(no cases)"


def render_table(records: List[Dict[str, Any]], floatfmt: str = ".2f", title: Optional[str] = None) -> str:
    body = tabulate(pd.DataFrame.from_records(records), headers="keys", tablefmt="github",
                    floatfmt=floatfmt, showindex=False)
    return f"{title}\n{body}" if title else body
