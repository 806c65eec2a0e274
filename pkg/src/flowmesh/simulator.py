"""Deterministic discrete-event scenario driver.

Virtual time only: events are totally ordered by (time, insertion sequence),
so identical config plus seed reproduces the event log byte for byte. The
loop owns the clock; the control plane and workers are passive objects that
it calls into.
"""

from __future__ import annotations

import heapq
import logging
import tempfile
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .cas import ArtifactKind, CASStore
from .control import (
    POLICIES,
    POLICY_FLOWMESH,
    Ablation,
    ControlPlane,
    MisfitReport,
    ScheduleDecision,
    UtilityWeights,
    WEIGHT_PRESETS,
)
from .defaults import (
    DEFAULT_FLEET,
    GiB,
    SimLimits,
    WORKER_TEMPLATES,
    WorkerTemplate,
    default_perf_entries,
)
from .errors import ConfigError, NoCapableWorker, UnknownSelector, WorkerGone
from .events import EventLog
from .metrics import MetricsReport, compute_metrics
from .perf import PerfModel
from .workflow import OperatorKind, ResourceClass, WorkflowDag, compile_workflow
from .workload import DEDUP_FRACTION, ArrivalSpec, WorkloadBundle, generate_workload

log = logging.getLogger(__name__)

CRASH = "crash"
SILENT_HANG = "silent_hang"


@dataclass(frozen=True)
class FailureSpec:
    selector: str  # "worker:<id>" | "class:<resource_class>" | "index:<n>"
    time: float
    kind: str  # crash | silent_hang

    def __post_init__(self) -> None:
        if self.kind not in (CRASH, SILENT_HANG):
            raise ConfigError(f"unknown failure kind {self.kind!r}")
        head = self.selector.split(":", 1)[0]
        if head not in ("worker", "class", "index") or ":" not in self.selector:
            raise UnknownSelector(self.selector)


@dataclass
class FleetEntry:
    resource_class: ResourceClass
    count: int
    cost_rate: float | None = None
    idle_power_watts: float | None = None
    peak_power_watts: float | None = None
    vram_bytes: int | None = None
    tenant_visibility: str = "shared"

    def template(self) -> WorkerTemplate:
        base = WORKER_TEMPLATES[self.resource_class]
        return WorkerTemplate(
            resource_class=self.resource_class,
            vram_bytes=self.vram_bytes if self.vram_bytes is not None else base.vram_bytes,
            arch_generation=base.arch_generation,
            cost_rate=self.cost_rate if self.cost_rate is not None else base.cost_rate,
            idle_power_watts=(self.idle_power_watts if self.idle_power_watts is not None
                              else base.idle_power_watts),
            peak_power_watts=(self.peak_power_watts if self.peak_power_watts is not None
                              else base.peak_power_watts),
        )


@dataclass
class WorkloadSpec:
    group: str = "A"
    count: int = 0
    arrival: ArrivalSpec = ArrivalSpec("constant", 6.0)
    dedup_fraction: float = DEDUP_FRACTION


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 600.0
    policy: str = POLICY_FLOWMESH
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    fleet: list[FleetEntry] = field(
        default_factory=lambda: [FleetEntry(rc, n) for rc, n in DEFAULT_FLEET]
    )
    perf_records: list[dict] = field(default_factory=list)
    workload: WorkloadSpec | None = None
    inline_workflows: list[tuple[float, dict]] = field(default_factory=list)
    failures: list[FailureSpec] = field(default_factory=list)
    ablation: Ablation = field(default_factory=Ablation)
    limits: SimLimits = field(default_factory=SimLimits)
    tenant_rules: dict[str, str] = field(default_factory=dict)

    def perf_model(self) -> PerfModel:
        merged: dict[tuple, dict] = {}
        for rec in default_perf_entries() + self.perf_records:
            merged[(rec["op_kind"], rec["model_ref"], rec["resource_class"])] = rec
        return PerfModel.from_records(merged.values())

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> "ScenarioConfig":
        try:
            return _config_from_dict(raw)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc


def _config_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    cfg = ScenarioConfig()
    cfg.seed = int(raw.get("seed", 0))
    cfg.duration_s = float(raw.get("duration_s", 600.0))
    cfg.policy = str(raw.get("policy", POLICY_FLOWMESH))
    if cfg.policy not in POLICIES:
        raise ConfigError(f"unknown policy {cfg.policy!r}")

    weights_raw = raw.get("weights")
    if isinstance(weights_raw, str):
        if weights_raw not in WEIGHT_PRESETS:
            raise ConfigError(f"unknown weight preset {weights_raw!r}")
        cfg.weights = WEIGHT_PRESETS[weights_raw]
    elif isinstance(weights_raw, dict):
        cfg.weights = UtilityWeights(
            w_t=float(weights_raw.get("w_t", 1.0)),
            w_c=float(weights_raw.get("w_c", 1.0)),
            w_l=float(weights_raw.get("w_l", 0.5)),
        )

    if "fleet" in raw:
        fleet = []
        for entry in raw["fleet"]:
            fleet.append(FleetEntry(
                resource_class=ResourceClass(entry["resource_class"]),
                count=int(entry.get("count", 1)),
                cost_rate=entry.get("cost_rate"),
                idle_power_watts=entry.get("idle_power_watts"),
                peak_power_watts=entry.get("peak_power_watts"),
                vram_bytes=(int(entry["vram_gib"] * GiB) if "vram_gib" in entry else None),
                tenant_visibility=str(entry.get("tenant_visibility", "shared")),
            ))
        if not fleet or sum(e.count for e in fleet) == 0:
            raise ConfigError("fleet must contain at least one worker")
        cfg.fleet = fleet

    cfg.perf_records = list(raw.get("perf", []))

    if "workload" in raw and raw["workload"]:
        w = raw["workload"]
        arr = w.get("arrival", {"kind": "constant", "start_qpm": 6.0})
        arrival = ArrivalSpec(
            kind=str(arr.get("kind", "constant")),
            start_qpm=float(arr.get("start_qpm", arr.get("qpm", 6.0))),
            end_qpm=float(arr.get("end_qpm", 0.0)),
        )
        if arrival.kind not in ("constant", "exp_decay"):
            raise ConfigError(f"unknown arrival kind {arrival.kind!r}")
        cfg.workload = WorkloadSpec(
            group=str(w.get("group", "A")),
            count=int(w.get("count", 0)),
            arrival=arrival,
            dedup_fraction=float(w.get("dedup_fraction", DEDUP_FRACTION)),
        )

    for item in raw.get("workflows", []):
        cfg.inline_workflows.append((float(item.get("at", 0.0)), item["document"]))

    for item in raw.get("failures", []):
        cfg.failures.append(FailureSpec(
            selector=str(item["selector"]), time=float(item["time"]), kind=str(item["kind"]),
        ))

    if "ablation" in raw:
        a = raw["ablation"]
        cfg.ablation = Ablation(
            consolidation=bool(a.get("consolidation", True)),
            elasticity=bool(a.get("elasticity", True)),
            multi_objective=bool(a.get("multi_objective", True)),
        )

    if "limits" in raw:
        limits = SimLimits()
        for key, value in raw["limits"].items():
            if key == "max_batch":
                limits.max_batch = {OperatorKind(k): int(v) for k, v in value.items()}
            elif hasattr(limits, key):
                current = getattr(limits, key)
                setattr(limits, key, type(current)(value))
            else:
                raise ConfigError(f"unknown limit {key!r}")
        cfg.limits = limits

    cfg.tenant_rules = {str(k): str(v) for k, v in raw.get("tenants", {}).items()}
    return cfg


def build_workload(cfg: ScenarioConfig) -> WorkloadBundle:
    if cfg.workload is None or cfg.workload.count <= 0:
        return WorkloadBundle(arrivals=[])
    return generate_workload(
        group=cfg.workload.group,
        count=cfg.workload.count,
        arrival=cfg.workload.arrival,
        seed=cfg.seed,
        duration_s=cfg.duration_s,
        dedup_fraction=cfg.workload.dedup_fraction,
    )


def validate_config(raw: dict[str, Any]) -> list[str]:
    """Schema plus semantic checks; returns human-readable problems."""
    problems: list[str] = []
    try:
        cfg = ScenarioConfig.from_dict(raw)
    except (ConfigError, UnknownSelector) as exc:
        return [f"config: {exc}"]
    if not cfg.fleet:
        problems.append("fleet: empty")
    perf = cfg.perf_model()
    needed: set[tuple[OperatorKind, str]] = set()
    try:
        bundle = build_workload(cfg)
    except ConfigError as exc:
        problems.append(f"workload: {exc}")
        bundle = WorkloadBundle(arrivals=[])
    docs = [doc for _, doc in bundle.arrivals] + [doc for _, doc in cfg.inline_workflows]
    for doc in docs:
        try:
            dag = compile_workflow(doc)
        except Exception as exc:  # surface typed schema errors with node ids
            problems.append(f"workflow {doc.get('workflow_id', '?')}: "
                            f"{type(exc).__name__}: {exc}")
            continue
        for spec in dag.nodes.values():
            needed.add((spec.op_kind, spec.model_ref))
    for kind, ref, rclass in perf.missing(needed):
        problems.append(f"perf: no entry for op_kind={kind} model={ref} class={rclass}")
    for fail in cfg.failures:
        if fail.time >= cfg.duration_s:
            problems.append(f"failure at t={fail.time} is not before duration {cfg.duration_s}")
    return problems


@dataclass
class RunResult:
    config: ScenarioConfig
    report: MetricsReport
    events: EventLog
    control: ControlPlane


class Simulation:
    """One scenario run over a virtual clock."""

    def __init__(self, config: ScenarioConfig, cas_root: str | Path | None = None):
        self.config = config
        self.now = 0.0
        self._heap: list[tuple[float, int, str, tuple]] = []
        self._seq = 0
        self.events = EventLog()
        if cas_root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="flowmesh-cas-")
            cas_root = self._tmp.name
        else:
            self._tmp = None
        self.cas = CASStore(cas_root)
        perf = config.perf_model()
        templates = []
        seen_classes = set()
        for entry in config.fleet:
            if entry.resource_class not in seen_classes:
                templates.append(entry.template())
                seen_classes.add(entry.resource_class)
        self.control = ControlPlane(
            cas=self.cas, perf=perf, limits=config.limits, weights=config.weights,
            policy=config.policy, ablation=config.ablation,
            tenant_rules=config.tenant_rules, templates=templates, events=self.events,
        )
        self._recent_submits: deque[float] = deque()
        self._ended = False

    # --- event plumbing ---

    def _push(self, t: float, kind: str, *payload: Any) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def inject_failure(self, selector: str, time: float, kind: str) -> FailureSpec:
        """Schedule a failure before the run starts."""
        spec = FailureSpec(selector=selector, time=time, kind=kind)
        if spec.time >= self.config.duration_s:
            raise ConfigError("failure time must fall inside the scenario duration")
        self._push(spec.time, "fail", spec)
        return spec

    def _resolve_selector(self, selector: str) -> str | None:
        head, _, rest = selector.partition(":")
        alive = [wid for wid in sorted(self.control.workers)
                 if self.control.workers[wid].alive]
        if head == "worker":
            return rest if rest in self.control.workers else None
        if head == "index":
            idx = int(rest)
            return alive[idx] if 0 <= idx < len(alive) else None
        if head == "class":
            for wid in alive:
                if self.control.workers[wid].descriptor.resource_class.value == rest:
                    return wid
            return None
        raise UnknownSelector(selector)

    # --- run ---

    def run(self) -> RunResult:
        cfg = self.config
        self.events.emit("scenario_start", 0.0, seed=cfg.seed, policy=cfg.policy,
                         duration_s=cfg.duration_s)
        for entry in cfg.fleet:
            for _ in range(entry.count):
                worker = self.control.provision_worker(
                    entry.template(), 0.0, warmup=0.0,
                    tenant_visibility=entry.tenant_visibility,
                )
                self._push(cfg.limits.heartbeat_s, "heartbeat", worker.worker_id)

        bundle = build_workload(cfg)
        for hex_digest, data in sorted(bundle.external_artifacts.items()):
            self.cas.put(data, kind=ArtifactKind.DATASET_SHARD)
        arrivals = list(bundle.arrivals)
        for at, doc in cfg.inline_workflows:
            arrivals.append((at, doc))
            for node in doc.get("nodes", {}).values():
                for ref in node.get("inputs", []):
                    if "external_payload" in ref:
                        # Convenience for inline fixtures: payload stored now,
                        # reference rewritten to its real address.
                        h = self.cas.put(str(ref.pop("external_payload")).encode("utf-8"))
                        ref["external_hash"] = h.digest
        arrivals.sort(key=lambda p: (p[0], p[1].get("workflow_id", "")))
        for at, doc in arrivals:
            self._push(at, "submit", doc)
        for spec in cfg.failures:
            if spec.time >= cfg.duration_s:
                raise ConfigError("failure time must fall inside the scenario duration")
            self._push(spec.time, "fail", spec)
        self._push(cfg.limits.tick_s, "tick")

        hard_cap = cfg.duration_s * 10.0 + 1800.0
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > hard_cap:
                break
            self.now = t
            handler = getattr(self, f"_on_{kind}")
            handler(*payload)
            if cfg.limits.check_invariants:
                self.control.check_conservation()
            if self.now >= cfg.duration_s and self.control.all_done() \
                    and not self.control.has_pending_work():
                break

        end_t = max(self.now, cfg.duration_s)
        self.control.finalize(end_t)
        completed = sum(
            1 for r in self.control.workflows.values() if r.completed_at is not None
        )
        failed = sum(1 for r in self.control.workflows.values() if r.failed is not None)
        self.events.emit("scenario_end", end_t, completed=completed, failed=failed)
        report = compute_metrics(self.events)
        return RunResult(config=cfg, report=report, events=self.events, control=self.control)

    # --- handlers ---

    def _on_submit(self, doc: dict) -> None:
        dag: WorkflowDag = compile_workflow(doc, submit_time=self.now)
        self.control.submit_workflow(dag, self.now)
        self._recent_submits.append(self.now)
        self._schedule_and_admit()

    def _on_tick(self) -> None:
        now = self.now
        cfg = self.config
        self.control.watchdog_tick(now)
        provisioned, _ = self.control.autoscale_tick(now)
        for wid in provisioned:
            worker = self.control.workers[wid]
            self._push(now + cfg.limits.heartbeat_s, "heartbeat", wid)
            self._push(worker.usable_at, "worker_ready", wid)
        for decision in self.control.speculate(now):
            self._admit(decision)
        self._schedule_and_admit()
        while self._recent_submits and self._recent_submits[0] < now - 60.0:
            self._recent_submits.popleft()
        active = sum(
            1 for w in self.control.workers.values() if w.alive and w.retired_at is None
        )
        self.events.emit(
            "tick", now, ready=self.control.ready_count(),
            running=self.control.running_count(), active_workers=active,
            arrivals_per_min=len(self._recent_submits),
        )
        if now < cfg.duration_s or not (self.control.all_done()
                                        and not self.control.has_pending_work()):
            self._push(now + cfg.limits.tick_s, "tick")

    def _on_heartbeat(self, worker_id: str) -> None:
        worker = self.control.workers.get(worker_id)
        if worker is None or not worker.alive:
            return  # silence is the failure signal
        hb = worker.heartbeat(self.now)
        self.events.emit(
            "heartbeat", self.now, worker=worker_id,
            power_watts=hb.power_watts, queued_ops=hb.queued_ops,
        )
        self._push(self.now + self.config.limits.heartbeat_s, "heartbeat", worker_id)

    def _on_worker_ready(self, worker_id: str) -> None:
        if worker_id in self.control.workers:
            self.events.emit("worker_ready", self.now, worker=worker_id)
            self._schedule_and_admit()

    def _on_fail(self, spec: FailureSpec) -> None:
        wid = self._resolve_selector(spec.selector)
        if wid is None:
            self.events.emit("failure_skipped", self.now, selector=spec.selector)
            return
        worker = self.control.workers[wid]
        if spec.kind == CRASH:
            worker.crash(self.now)
            self.events.emit("worker_crashed", self.now, worker=wid)
        else:
            worker.hang(self.now)
            self.events.emit("worker_hung", self.now, worker=wid)

    def _on_batch_done(self, worker_id: str, epoch: int) -> None:
        worker = self.control.workers.get(worker_id)
        if worker is None or not worker.alive or worker.hung or worker.epoch != epoch:
            return  # stale completion from a crashed or hung lane
        if worker.current is None:
            return
        batch = worker.current.batch
        results = worker.complete_current(self.now)
        self.events.emit(
            "batch_finished", self.now, worker=worker_id, batch_id=batch.batch_id,
            batch_size=len(results),
        )
        for member, output in results:
            self.control.on_completion(
                worker_id, (member.workflow_id, member.operator_id), output, self.now
            )
        if worker.draining and not worker.queue and worker.current is None:
            self.control._retire_worker(worker, self.now, reason="drained")
        else:
            self._kick(worker_id)
        self._schedule_and_admit()

    def _on_misfit(self, worker_id: str, epoch: int) -> None:
        worker = self.control.workers.get(worker_id)
        if worker is None or not worker.alive or worker.epoch != epoch:
            return
        if worker.current is None or not worker.current.info.misfit:
            return
        observed = worker.current.info.observed_mem_bytes
        batch = worker.abort_misfit(self.now)
        for member in batch.members:
            report = MisfitReport(
                worker_id=worker_id,
                member=(member.workflow_id, member.operator_id),
                observed_bytes=observed,
            )
            try:
                self.control.handle_resource_misfit(report, self.now)
            except NoCapableWorker as exc:
                log.warning("misfit unrecoverable: %s", exc)
        self._kick(worker_id)
        self._schedule_and_admit()

    # --- scheduling glue ---

    def _admit(self, decision: ScheduleDecision) -> None:
        try:
            self.control.admit(decision, self.now)
        except WorkerGone:
            return
        self._kick(decision.worker_id)

    def _schedule_and_admit(self) -> None:
        for decision in self.control.schedule_step(self.now):
            self._admit(decision)

    def _kick(self, worker_id: str) -> None:
        worker = self.control.workers.get(worker_id)
        if worker is None:
            return
        info = worker.maybe_start(self.now)
        if info is None:
            return
        if info.missing_input is not None:
            for member in info.batch.members:
                self.control.fail_unresolvable(
                    (member.workflow_id, member.operator_id),
                    info.missing_input, self.now,
                )
            self._kick(worker_id)
            return
        if info.misfit:
            self.events.emit(
                "misfit_pending", self.now, worker=worker_id,
                batch_id=info.batch.batch_id, observed_bytes=info.observed_mem_bytes,
            )
            self._push(info.finish_t, "misfit", worker_id, worker.epoch)
            return
        if info.evicted:
            self.events.emit("signature_evicted", self.now, worker=worker_id,
                             signatures=sorted(info.evicted))
        if info.load_s > 0:
            self.events.emit(
                "load_started", self.now, worker=worker_id,
                signature=info.batch.signature.digest, load_s=info.load_s,
            )
        if info.fetch_s > 0:
            self.events.emit("fetch", self.now, worker=worker_id, fetch_s=info.fetch_s)
        self.events.emit(
            "batch_started", self.now, worker=worker_id, batch_id=info.batch.batch_id,
            batch_size=len(info.batch.members), exec_s=info.exec_s,
            power_watts=info.exec_power_watts, finish_t=info.finish_t,
            replica=info.batch.is_replica,
        )
        self._push(info.finish_t, "batch_done", worker_id, worker.epoch)


def run_scenario(config: ScenarioConfig, cas_root: str | Path | None = None) -> RunResult:
    """Build and run one scenario end to end."""
    return Simulation(config, cas_root=cas_root).run()
