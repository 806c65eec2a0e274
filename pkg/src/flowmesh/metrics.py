"""Scenario metrics from the event log.

Latency is per workflow (completion minus submission, covering every
sub-stage of its DAG). The two composite efficiency figures are

    cdp = (total_cost / task_count) * avg_latency_s
    edp = (total_energy / task_count) * avg_latency_s

computed in exactly that order; lower is better. Both are absent (null) when
no task completed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import TruncatedLog
from .events import EventLog, load_records


def _quantile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    idx = max(0, math.ceil(q * len(ordered)) - 1)
    return ordered[idx]


@dataclass
class MetricsReport:
    task_count: int
    failed_count: int
    latencies_s: list[float]
    avg_latency_s: float | None
    throughput_per_min: float
    total_cost_usd: float
    total_energy_j: float
    cdp: float | None
    edp: float | None
    queueing_s: dict[str, float]
    dedup_savings: int
    executions: int
    completions: int
    batch_occupancy: dict[str, int]
    active_workers: list[tuple[float, int]]
    detections: list[dict[str, Any]]
    per_worker: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_count": self.task_count,
            "failed_count": self.failed_count,
            "latencies_s": self.latencies_s,
            "avg_latency_s": self.avg_latency_s,
            "throughput_per_min": self.throughput_per_min,
            "total_cost_usd": self.total_cost_usd,
            "total_energy_j": self.total_energy_j,
            "cdp": self.cdp,
            "edp": self.edp,
            "queueing_s": self.queueing_s,
            "dedup_savings": self.dedup_savings,
            "executions": self.executions,
            "completions": self.completions,
            "batch_occupancy": self.batch_occupancy,
            "active_workers": [[t, n] for t, n in self.active_workers],
            "detections": self.detections,
            "per_worker": self.per_worker,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def compute_metrics(source: EventLog | Iterable[dict[str, Any]] | str | Path) -> MetricsReport:
    """Aggregate one completed run's event log into a report."""
    records = load_records(source)
    if not any(r["event"] == "scenario_end" for r in records):
        raise TruncatedLog("no scenario_end record")

    latencies: list[float] = []
    submits: dict[str, float] = {}
    failed = 0
    queue_waits: list[float] = []
    executions = 0
    completions = 0
    batch_hist: dict[str, int] = {}
    series: list[tuple[float, int]] = []
    detections: list[dict[str, Any]] = []
    per_worker: dict[str, dict[str, float]] = {}

    for rec in records:
        kind = rec["event"]
        if kind == "workflow_submitted":
            submits[rec["workflow"]] = rec["t"]
        elif kind == "workflow_completed":
            latencies.append(rec["latency_s"])
        elif kind == "workflow_failed":
            failed += 1
        elif kind == "op_completed":
            completions += 1
            if rec.get("queue_wait_s") is not None:
                queue_waits.append(rec["queue_wait_s"])
        elif kind in ("publish", "duplicate_completion"):
            executions += 1
        elif kind == "batch_started":
            size = str(rec["batch_size"])
            batch_hist[size] = batch_hist.get(size, 0) + 1
        elif kind == "tick":
            series.append((rec["t"], rec["active_workers"]))
        elif kind == "worker_failed":
            detections.append({
                "worker": rec["worker"],
                "silenced_at": rec["silenced_at"],
                "detected_at": rec["detected_at"],
                "detection_s": rec["detected_at"] - rec["silenced_at"],
            })
        elif kind in ("worker_retired", "worker_removed"):
            per_worker[rec["worker"]] = {
                "cost_usd": rec["cost_usd"],
                "energy_joules": rec["energy_joules"],
            }

    total_cost = sum(w["cost_usd"] for w in per_worker.values())
    total_energy = sum(w["energy_joules"] for w in per_worker.values())
    task_count = len(latencies)
    avg_latency = sum(latencies) / task_count if task_count else None

    if task_count and submits:
        makespan = max(
            rec["t"] for rec in records if rec["event"] == "workflow_completed"
        ) - min(submits.values())
        throughput = task_count / (makespan / 60.0) if makespan > 0 else 0.0
    else:
        throughput = 0.0

    if task_count:
        cdp = total_cost / task_count * avg_latency
        edp = total_energy / task_count * avg_latency
    else:
        cdp = None
        edp = None

    if queue_waits:
        queueing = {
            "mean": sum(queue_waits) / len(queue_waits),
            "p50": _quantile(queue_waits, 0.50),
            "p95": _quantile(queue_waits, 0.95),
            "max": max(queue_waits),
        }
    else:
        queueing = {"mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0}

    return MetricsReport(
        task_count=task_count,
        failed_count=failed,
        latencies_s=latencies,
        avg_latency_s=avg_latency,
        throughput_per_min=throughput,
        total_cost_usd=total_cost,
        total_energy_j=total_energy,
        cdp=cdp,
        edp=edp,
        queueing_s=queueing,
        dedup_savings=completions - executions,
        executions=executions,
        completions=completions,
        batch_occupancy=batch_hist,
        active_workers=series,
        detections=detections,
        per_worker=per_worker,
    )


def report_csv_rows(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    """Per-task rows for the delimited report."""
    submits: dict[str, float] = {}
    tenants: dict[str, str] = {}
    rows = []
    for rec in records:
        if rec["event"] == "workflow_submitted":
            submits[rec["workflow"]] = rec["t"]
            tenants[rec["workflow"]] = rec.get("tenant", "")
        elif rec["event"] == "workflow_completed":
            wf = rec["workflow"]
            rows.append({
                "workflow_id": wf,
                "tenant_id": tenants.get(wf, ""),
                "submitted_at": submits.get(wf, 0.0),
                "completed_at": rec["t"],
                "latency_s": rec["latency_s"],
                "status": "completed",
            })
        elif rec["event"] == "workflow_failed":
            wf = rec["workflow"]
            rows.append({
                "workflow_id": wf,
                "tenant_id": tenants.get(wf, ""),
                "submitted_at": submits.get(wf, 0.0),
                "completed_at": rec["t"],
                "latency_s": "",
                "status": f"failed:{rec.get('error', '')}",
            })
    rows.sort(key=lambda r: r["workflow_id"])
    return rows
