# tzcvm_sim/conformance_cli/errors.py

from typing import Optional


class ScenarioError(Exception):
    """Base error for scenario files, cases and replays."""


class ParseError(ScenarioError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        where = []
        if field:
            where.append(f"field {field}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class CaseFailure(ScenarioError):
    """An assertion of a conformance case did not hold."""


class CaseSkipped(ScenarioError):
    """A case cannot run in the current mode (e.g. race cases single-threaded)."""
