"""Timed performance model standing in for real engine throughput.

A batch of n compatible operators runs in base + per_item * n**alpha seconds:
sub-linear in n for alpha < 1, which is where continuous batching pays off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import ConfigError
from .workflow import OperatorKind, ResourceClass

PerfKey = tuple[OperatorKind, str, ResourceClass]


@dataclass(frozen=True)
class PerfEntry:
    base_latency_s: float
    per_item_latency_s: float
    alpha: float  # batch efficiency exponent, in (0, 1]
    load_time_s: float
    mem_footprint_bytes: int
    per_item_mem_bytes: int
    output_bytes: int

    def duration(self, n: int) -> float:
        return self.base_latency_s + self.per_item_latency_s * n**self.alpha

    def batch_mem(self, n: int, model_mem: int | None = None) -> int:
        mem = self.mem_footprint_bytes if model_mem is None else model_mem
        return mem + n * self.per_item_mem_bytes


class PerfModel:
    """Lookup table keyed by (op_kind, model_ref, resource_class)."""

    def __init__(self, entries: Mapping[PerfKey, PerfEntry]):
        self._entries = dict(entries)

    @staticmethod
    def from_records(records: Iterable[Mapping]) -> "PerfModel":
        entries: dict[PerfKey, PerfEntry] = {}
        for rec in records:
            try:
                key = (
                    OperatorKind(rec["op_kind"]),
                    str(rec["model_ref"]),
                    ResourceClass(rec["resource_class"]),
                )
                entry = PerfEntry(
                    base_latency_s=float(rec["base_latency_s"]),
                    per_item_latency_s=float(rec["per_item_latency_s"]),
                    alpha=float(rec["alpha"]),
                    load_time_s=float(rec["load_time_s"]),
                    mem_footprint_bytes=int(rec["mem_footprint_bytes"]),
                    per_item_mem_bytes=int(rec["per_item_mem_bytes"]),
                    output_bytes=int(rec["output_bytes"]),
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad perf record {rec!r}: {exc}") from exc
            if not (0.0 < entry.alpha <= 1.0):
                raise ConfigError(f"alpha must be in (0,1], got {entry.alpha}")
            if entry.base_latency_s <= 0 or entry.per_item_latency_s <= 0:
                raise ConfigError("latencies must be positive")
            entries[key] = entry
        return PerfModel(entries)

    def entry(self, kind: OperatorKind, model_ref: str, rclass: ResourceClass) -> PerfEntry | None:
        return self._entries.get((kind, model_ref, rclass))

    def require(self, kind: OperatorKind, model_ref: str, rclass: ResourceClass) -> PerfEntry:
        entry = self.entry(kind, model_ref, rclass)
        if entry is None:
            raise ConfigError(f"no perf entry for ({kind}, {model_ref}, {rclass})")
        return entry

    def missing(self, needed: Iterable[tuple[OperatorKind, str]]) -> list[tuple[str, str, str]]:
        """(op_kind, model, class) holes for the given kind/model pairs."""
        holes = []
        for kind, ref in sorted(set(needed)):
            for rclass in ResourceClass:
                if (kind, ref, rclass) not in self._entries:
                    holes.append((kind.value, ref, rclass.value))
        return holes
