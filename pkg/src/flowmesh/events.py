"""Shared newline-delimited event log: the audit trail for metrics and tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator


class EventLog:
    """Append-only ordered record list, serializable to one JSON object per line."""

    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []
        self._seq = 0

    def emit(self, kind: str, t: float, **fields: Any) -> dict[str, Any]:
        rec = {"event": kind, "t": t, "seq": self._seq}
        rec.update(fields)
        self._seq += 1
        self.records.append(rec)
        return rec

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["event"] == kind]

    def to_lines(self) -> Iterator[str]:
        for rec in self.records:
            yield json.dumps(rec, sort_keys=True, separators=(",", ":"))

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @staticmethod
    def read(path: str | Path) -> list[dict[str, Any]]:
        return [json.loads(line) for line in Path(path).read_text("utf-8").splitlines() if line]


def load_records(source: "EventLog | Iterable[dict[str, Any]] | str | Path") -> list[dict[str, Any]]:
    if isinstance(source, EventLog):
        return source.records
    if isinstance(source, (str, Path)):
        return EventLog.read(source)
    return list(source)
