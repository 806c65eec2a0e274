"""Global control plane: dedup by task identity, batching by signature,
utility-maximizing placement, admission, failure recovery and speculation.

All state mutation happens through the methods below, called from a single
logical event loop, so the plane is deterministic by construction. Workers are
plain objects owned by the plane; the simulation harness turns returned plans
into timed events.

Scoring (mirrored verbatim by the brute-force test oracle):

    T_eff(j, B)  = n / (base_j + per_item_j * n**alpha_j)
    t_norm       = T_eff / max over usable workers with a perf entry of T_eff
    c_norm       = cost_rate_j / max cost_rate over usable workers (0 if all 0)
    G_loc(j, B)  = 0.6 * weights_resident + 0.3 * input_cache_fraction
                   + 0.1 * tokenizer_adapter_present
    U(j, B)      = w_t * t_norm - w_c * c_norm + w_l * G_loc

Candidate batches per signature are FCFS prefixes of sizes {1, ceil(max/2),
max}. Ties on U break by lowest worker id, then earliest first-member key
(submit time, workflow id, operator id), then larger batch.
"""

from __future__ import annotations

import logging
import math
from bisect import insort
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .cas import CACHE_EXECUTOR, CASStore, LineageEdge, PublishOutcome
from .defaults import SimLimits, WorkerTemplate
from .errors import (
    DuplicateWorkflowId,
    InfeasiblePair,
    NoCapableWorker,
    UnknownOperator,
    UnknownWorker,
    WorkerGone,
)
from .events import EventLog
from .identity import ContentHash, ExecSignature, TaskIdentity
from .perf import PerfEntry, PerfModel
from .workers import AdmittedBatch, BatchMember, Worker, WorkerDescriptor
from .workflow import OperatorKind, ResourceClass, WorkflowDag, class_satisfies

log = logging.getLogger(__name__)

MemberKey = tuple[str, str]  # (workflow_id, operator_id)

POLICY_FLOWMESH = "flowmesh"
POLICY_MF = "mf_first_fit"
POLICY_DS = "ds_static"
POLICY_DR = "dr_round_robin"
POLICIES = (POLICY_FLOWMESH, POLICY_MF, POLICY_DS, POLICY_DR)


class OpState(str, Enum):
    BLOCKED = "blocked"
    READY = "ready"
    RUNNING = "running"
    COMPLETED = "completed"


@dataclass(frozen=True)
class UtilityWeights:
    w_t: float = 1.0
    w_c: float = 1.0
    w_l: float = 0.5

    def __post_init__(self) -> None:
        if self.w_t < 0 or self.w_c < 0 or self.w_l < 0:
            raise ValueError("utility weights must be non-negative")
        if self.w_t == self.w_c == self.w_l == 0:
            raise ValueError("utility weights must not all be zero")


WEIGHT_PRESETS = {
    "default": UtilityWeights(1.0, 1.0, 0.5),
    "cost_first": UtilityWeights(0.4, 2.0, 0.5),
    "performance_first": UtilityWeights(2.0, 0.2, 0.5),
}


@dataclass
class Ablation:
    consolidation: bool = True
    elasticity: bool = True
    multi_objective: bool = True


@dataclass
class Instance:
    """One logical operator of one workflow."""

    key: MemberKey
    spec: Any  # OperatorSpec
    state: OpState = OpState.BLOCKED
    became_ready_at: float = 0.0
    attempt_count: int = 0
    assigned_worker: str | None = None
    identity: TaskIdentity | None = None
    signature: ExecSignature | None = None
    input_hashes: tuple[ContentHash, ...] = ()
    corrected_mem: int | None = None
    group_key: tuple | None = None
    queue_wait_s: float | None = None


@dataclass
class DedupGroup:
    """Operators sharing a task identity: executed at most once, fanned out."""

    key: tuple
    identity: TaskIdentity
    signature: ExecSignature
    op_kind: OperatorKind
    model_ref: str
    resource_class: ResourceClass
    affinity: str  # "shared" or "private:<tenant>"
    consumers: list[MemberKey] = field(default_factory=list)
    state: str = "pending"  # pending | running | completed
    fcfs_key: tuple = ()
    assignments: dict[str, float] = field(default_factory=dict)  # worker -> admit time
    replica_launched: bool = False

    @property
    def representative(self) -> MemberKey:
        return self.consumers[0]


@dataclass
class ScheduleDecision:
    worker_id: str
    signature: ExecSignature
    group_keys: list[tuple]
    utility: float
    decided_at: float
    is_replica: bool = False


@dataclass
class MisfitReport:
    worker_id: str
    member: MemberKey
    observed_bytes: int


@dataclass
class _WorkflowRecord:
    dag: WorkflowDag
    submitted_at: float
    produced: dict[str, ContentHash] = field(default_factory=dict)
    completed_ops: set[str] = field(default_factory=set)
    completed_at: float | None = None
    failed: str | None = None


class ControlPlane:
    def __init__(
        self,
        cas: CASStore,
        perf: PerfModel,
        limits: SimLimits,
        weights: UtilityWeights | None = None,
        policy: str = POLICY_FLOWMESH,
        ablation: Ablation | None = None,
        tenant_rules: dict[str, str] | None = None,
        templates: Iterable[WorkerTemplate] = (),
        events: EventLog | None = None,
    ):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.cas = cas
        self.perf = perf
        self.limits = limits
        self.weights = weights or UtilityWeights()
        self.policy = policy
        self.ablation = ablation or Ablation()
        self.tenant_rules = tenant_rules or {}
        self.templates = list(templates)
        self.events = events or EventLog()

        self.workers: dict[str, Worker] = {}
        self.retired_workers: list[Worker] = []
        self.workflows: dict[str, _WorkflowRecord] = {}
        self.instances: dict[MemberKey, Instance] = {}
        self.groups: dict[tuple, DedupGroup] = {}
        self.pool: dict[str, list[tuple[tuple, tuple]]] = {}  # sig hex -> [(fcfs, gkey)]
        self.running_groups: set[tuple] = set()
        self.worker_members: dict[str, set[MemberKey]] = {}
        self.duration_samples: dict[str, list[float]] = {}
        self.detections: list[dict[str, float | str]] = []
        self._batch_seq = 0
        self._worker_seq = 0
        self._pending_admission: dict[str, int] = {}
        self._scale_flags: dict[str, bool] = {}
        # baseline state
        self.mf_pending: list[str] = []
        self.mf_assignment: dict[str, str] = {}  # workflow -> worker
        self.mf_worker_of: dict[str, str] = {}  # worker -> workflow
        self._dr_pointer = 0
        self._ds_pointers: dict[str, int] = {"train": 0, "infer": 0}

    # ------------------------------------------------------------------
    # fleet
    # ------------------------------------------------------------------

    @property
    def dedup_enabled(self) -> bool:
        return self.policy == POLICY_FLOWMESH and self.ablation.consolidation

    def register_worker(self, worker: Worker) -> None:
        self.workers[worker.worker_id] = worker
        self.worker_members.setdefault(worker.worker_id, set())

    def provision_worker(
        self, template: WorkerTemplate, now: float, warmup: float | None = None,
        tenant_visibility: str = "shared",
    ) -> Worker:
        wid = f"w-{self._worker_seq:03d}"
        self._worker_seq += 1
        desc = WorkerDescriptor(
            worker_id=wid,
            resource_class=template.resource_class,
            vram_bytes=template.vram_bytes,
            arch_generation=template.arch_generation,
            cost_rate=template.cost_rate,
            idle_power_watts=template.idle_power_watts,
            peak_power_watts=template.peak_power_watts,
            provisioned_at=now,
            tenant_visibility=tenant_visibility,
        )
        worker = Worker(desc, self.perf, self.cas, self.limits)
        worker.usable_at = now + (self.limits.warmup_s if warmup is None else warmup)
        worker.idle_since = worker.usable_at
        self.register_worker(worker)
        self.events.emit(
            "worker_provisioned", now, worker=wid, resource_class=template.resource_class.value,
            cost_rate=template.cost_rate, idle_power_watts=template.idle_power_watts,
            peak_power_watts=template.peak_power_watts, usable_at=worker.usable_at,
        )
        return worker

    def usable_workers(self, now: float) -> list[Worker]:
        return [w for wid, w in sorted(self.workers.items()) if w.usable(now)]

    def _retire_worker(self, worker: Worker, now: float, reason: str) -> None:
        worker.retire(now)
        self.workers.pop(worker.worker_id, None)
        self.retired_workers.append(worker)
        self.events.emit(
            "worker_retired", now, worker=worker.worker_id, reason=reason,
            provisioned_at=worker.descriptor.provisioned_at,
            energy_joules=worker.energy_joules, cost_usd=worker.cost_usd(now),
        )

    def finalize(self, now: float) -> None:
        """Close accounting for every worker still provisioned at scenario end."""
        for wid in sorted(list(self.workers)):
            worker = self.workers[wid]
            if worker.retired_at is None:
                self._retire_worker(worker, now, reason="scenario_end")
            else:
                self.workers.pop(wid, None)
                self.retired_workers.append(worker)

    # ------------------------------------------------------------------
    # submission and readiness
    # ------------------------------------------------------------------

    def submit_workflow(self, dag: WorkflowDag, now: float) -> str:
        if dag.workflow_id in self.workflows:
            raise DuplicateWorkflowId(dag.workflow_id)
        dag.submit_time = now
        rec = _WorkflowRecord(dag=dag, submitted_at=now)
        self.workflows[dag.workflow_id] = rec
        for op_id in dag.nodes:
            key = (dag.workflow_id, op_id)
            self.instances[key] = Instance(key=key, spec=dag.nodes[op_id])
        self.events.emit(
            "workflow_submitted", now, workflow=dag.workflow_id,
            tenant=dag.tenant_id, nodes=len(dag.nodes),
        )
        if self.policy == POLICY_MF:
            self.mf_pending.append(dag.workflow_id)
        ready = [(dag.workflow_id, op) for op in dag.source_ops()]
        self.deduplicate(ready, now)
        self._maybe_propagate_cache_completions(now)
        return dag.workflow_id

    def _affinity_of(self, tenant_id: str) -> str:
        rule = self.tenant_rules.get(tenant_id, "any")
        return f"private:{tenant_id}" if rule == "private_only" else "shared"

    def deduplicate(self, ready_keys: Iterable[MemberKey], now: float) -> list[DedupGroup]:
        """Partition newly ready operators into dedup groups.

        Groups whose identity already has a published output complete from
        cache immediately, without execution.
        """
        touched: list[DedupGroup] = []
        for key in ready_keys:
            inst = self.instances[key]
            wf = self.workflows[key[0]]
            spec = inst.spec
            inst.input_hashes = self._resolve_inputs(key)
            inst.identity = spec.identity(inst.input_hashes)
            inst.signature = spec.signature()
            inst.state = OpState.READY
            inst.became_ready_at = now
            self.events.emit(
                "op_ready", now, workflow=key[0], op=key[1],
                identity=inst.identity.digest, signature=inst.signature.digest,
            )
            if self.dedup_enabled:
                cached = self.cas.lookup_output(inst.identity)
                if cached is not None:
                    self._complete_instance(key, cached, CACHE_EXECUTOR, now)
                    continue
                gkey = (inst.identity.digest, self._affinity_of(spec.tenant_id))
            else:
                gkey = (inst.identity.digest, self._affinity_of(spec.tenant_id), key)
            group = self.groups.get(gkey)
            fcfs = (wf.submitted_at, key[0], key[1])
            if group is None:
                group = DedupGroup(
                    key=gkey, identity=inst.identity, signature=inst.signature,
                    op_kind=spec.op_kind, model_ref=spec.model_ref,
                    resource_class=spec.resource_class,
                    affinity=self._affinity_of(spec.tenant_id),
                    consumers=[key], fcfs_key=fcfs,
                )
                self.groups[gkey] = group
                self._pool_insert(group)
            else:
                group.consumers.append(key)
                self.events.emit(
                    "dedup_joined", now, workflow=key[0], op=key[1],
                    identity=inst.identity.digest, consumers=len(group.consumers),
                )
                if group.state == "running":
                    inst.state = OpState.RUNNING
                    inst.assigned_worker = next(iter(group.assignments), None)
                elif group.state == "pending" and fcfs < group.fcfs_key:
                    self._pool_remove(group)
                    group.fcfs_key = fcfs
                    group.consumers.sort(key=self._member_fcfs)
                    self._pool_insert(group)
            inst.group_key = gkey
            touched.append(group)
        return touched

    def _member_fcfs(self, key: MemberKey) -> tuple:
        return (self.workflows[key[0]].submitted_at, key[0], key[1])

    def _pool_insert(self, group: DedupGroup) -> None:
        entries = self.pool.setdefault(group.signature.digest, [])
        insort(entries, (group.fcfs_key, group.key))

    def _pool_remove(self, group: DedupGroup) -> None:
        entries = self.pool.get(group.signature.digest, [])
        try:
            entries.remove((group.fcfs_key, group.key))
        except ValueError:
            pass
        if not entries:
            self.pool.pop(group.signature.digest, None)

    def _resolve_inputs(self, key: MemberKey) -> tuple[ContentHash, ...]:
        wf = self.workflows[key[0]]
        hashes = []
        for ref in wf.dag.nodes[key[1]].inputs:
            if ref.external is not None:
                hashes.append(ref.external)
            else:
                hashes.append(wf.produced[ref.from_op])
        return tuple(hashes)

    # ------------------------------------------------------------------
    # feasibility and utility
    # ------------------------------------------------------------------

    def _effective_model_mem(self, group: DedupGroup, entry: PerfEntry) -> int:
        mem = entry.mem_footprint_bytes
        hint = None
        for key in group.consumers:
            inst = self.instances[key]
            params_hint = inst.spec.params.get("mem_bytes")
            if inst.corrected_mem is not None:
                hint = max(hint or 0, inst.corrected_mem)
            elif isinstance(params_hint, int) and params_hint > 0:
                hint = max(hint or 0, params_hint) if hint is None else max(hint, params_hint)
        return hint if hint is not None else mem

    def feasible(self, worker: Worker, batch: list[DedupGroup]) -> bool:
        """Hard constraints: VRAM, class capability, tenant affinity."""
        if not batch:
            return False
        head = batch[0]
        entry = self.perf.entry(head.op_kind, head.model_ref, worker.descriptor.resource_class)
        if entry is None:
            return False
        if not class_satisfies(worker.descriptor.resource_class, head.resource_class):
            return False
        model_mem = max(self._effective_model_mem(g, entry) for g in batch)
        if model_mem + len(batch) * entry.per_item_mem_bytes > worker.descriptor.vram_bytes:
            return False
        visibility = worker.descriptor.tenant_visibility
        for group in batch:
            if group.affinity == "shared":
                if visibility != "shared":
                    return False
            elif group.affinity != visibility:
                return False
        return True

    def _throughput(self, entry: PerfEntry, n: int) -> float:
        return n / (entry.base_latency_s + entry.per_item_latency_s * n**entry.alpha)

    def locality_gain(self, worker: Worker, batch: list[DedupGroup]) -> float:
        sig = batch[0].signature
        resident = 1.0 if worker.cache.is_resident(sig) else 0.0
        aux = 1.0 if worker.cache.has_aux(sig) else 0.0
        hashes: list[str] = []
        seen: set[str] = set()
        for group in batch:
            for h in self.instances[group.representative].input_hashes:
                if h.digest not in seen:
                    seen.add(h.digest)
                    hashes.append(h.digest)
        if hashes:
            hits = sum(1 for d in hashes if d in worker.cache.artifacts)
            frac = hits / len(hashes)
        else:
            frac = 0.0
        return 0.6 * resident + 0.3 * frac + 0.1 * aux

    def estimate_utility(
        self,
        worker: Worker,
        batch: list[DedupGroup],
        weights: UtilityWeights | None = None,
        now: float = 0.0,
    ) -> float:
        """Score one feasible (worker, batch) pair; InfeasiblePair otherwise."""
        if not self.feasible(worker, batch):
            raise InfeasiblePair(worker.worker_id)
        weights = weights or self.weights
        head = batch[0]
        n = len(batch)
        usable = self.usable_workers(now)
        entry = self.perf.require(head.op_kind, head.model_ref, worker.descriptor.resource_class)
        t_eff = self._throughput(entry, n)
        peers = [
            self.perf.entry(head.op_kind, head.model_ref, w.descriptor.resource_class)
            for w in usable
        ]
        t_max = max(
            (self._throughput(e, n) for e in peers if e is not None),
            default=t_eff,
        )
        t_norm = t_eff / t_max if t_max > 0 else 0.0
        c_max = max((w.descriptor.cost_rate for w in usable), default=0.0)
        c_norm = worker.descriptor.cost_rate / c_max if c_max > 0 else 0.0
        g_loc = self.locality_gain(worker, batch)
        return weights.w_t * t_norm - weights.w_c * c_norm + weights.w_l * g_loc

    # ------------------------------------------------------------------
    # scheduling
    # ------------------------------------------------------------------

    def _candidate_sizes(self, kind: OperatorKind, queue_len: int) -> list[int]:
        cap = self.limits.max_batch.get(kind, 1) if self.dedup_enabled else 1
        sizes = {min(n, queue_len) for n in (1, math.ceil(cap / 2), cap)}
        return sorted(sizes)

    def _outstanding(self, worker: Worker) -> int:
        return worker.outstanding_batches() + self._pending_admission.get(worker.worker_id, 0)

    def schedule_step(self, now: float) -> list[ScheduleDecision]:
        """Commit maximum-utility (worker, batch) pairs until none is feasible.

        Committed members move to RUNNING; each decision must then be handed
        to admit() (or rolled back) before the next call.
        """
        if self.policy != POLICY_FLOWMESH:
            from . import baselines

            return baselines.step(self, now)
        if not self.ablation.multi_objective:
            return self._schedule_round_robin(now)

        decisions: list[ScheduleDecision] = []
        while True:
            usable = self.usable_workers(now)
            c_max = max((w.descriptor.cost_rate for w in usable), default=0.0)
            t_max_memo: dict[tuple[str, int], float] = {}
            best: tuple | None = None  # (-U, worker_id, member_fcfs, -n, worker, batch)
            for sig_hex in sorted(self.pool):
                entries = self.pool[sig_hex]
                if not entries:
                    continue
                queue = [self.groups[gkey] for _, gkey in entries]
                head = queue[0]
                for n in self._candidate_sizes(head.op_kind, len(queue)):
                    batch = queue[:n]
                    for worker in usable:
                        if self._outstanding(worker) >= self.limits.max_outstanding_batches:
                            continue
                        if not self.feasible(worker, batch):
                            continue
                        entry = self.perf.require(
                            head.op_kind, head.model_ref, worker.descriptor.resource_class
                        )
                        t_eff = self._throughput(entry, n)
                        memo_key = (sig_hex, n)
                        if memo_key not in t_max_memo:
                            peers = (
                                self.perf.entry(head.op_kind, head.model_ref,
                                                w.descriptor.resource_class)
                                for w in usable
                            )
                            t_max_memo[memo_key] = max(
                                (self._throughput(e, n) for e in peers if e is not None),
                                default=t_eff,
                            )
                        t_max = t_max_memo[memo_key]
                        t_norm = t_eff / t_max if t_max > 0 else 0.0
                        c_norm = worker.descriptor.cost_rate / c_max if c_max > 0 else 0.0
                        g_loc = self.locality_gain(worker, batch)
                        utility = (self.weights.w_t * t_norm - self.weights.w_c * c_norm
                                   + self.weights.w_l * g_loc)
                        cand = (-utility, worker.worker_id, batch[0].fcfs_key, -n, worker, batch)
                        if best is None or cand[:4] < best[:4]:
                            best = cand
            if best is None:
                break
            _, wid, _, _, worker, batch = best
            decisions.append(self._commit(worker, batch, -best[0], now))
        return decisions

    def _schedule_round_robin(self, now: float) -> list[ScheduleDecision]:
        """Ablation fallback: max-size FCFS batches, round-robin placement."""
        decisions: list[ScheduleDecision] = []
        progress = True
        while progress:
            progress = False
            for sig_hex in sorted(self.pool):
                entries = self.pool.get(sig_hex, [])
                if not entries:
                    continue
                queue = [self.groups[gkey] for _, gkey in entries]
                head = queue[0]
                sizes = self._candidate_sizes(head.op_kind, len(queue))
                batch = queue[: sizes[-1]]
                order = sorted(self.workers)
                if not order:
                    continue
                for offset in range(len(order)):
                    wid = order[(self._dr_pointer + offset) % len(order)]
                    worker = self.workers[wid]
                    if not worker.usable(now):
                        continue
                    if self._outstanding(worker) >= self.limits.max_outstanding_batches:
                        continue
                    if not self.feasible(worker, batch):
                        continue
                    self._dr_pointer = (self._dr_pointer + offset + 1) % len(order)
                    decisions.append(self._commit(worker, batch, 0.0, now))
                    progress = True
                    break
        return decisions

    def _commit(
        self, worker: Worker, batch: list[DedupGroup], utility: float, now: float,
        is_replica: bool = False,
    ) -> ScheduleDecision:
        assert self.feasible(worker, batch), "commit would violate feasibility"
        for group in batch:
            if not is_replica:
                self._pool_remove(group)
                group.state = "running"
                self.running_groups.add(group.key)
            group.assignments[worker.worker_id] = now
            for key in group.consumers:
                inst = self.instances[key]
                inst.state = OpState.RUNNING
                if not is_replica:
                    inst.assigned_worker = worker.worker_id
                    inst.queue_wait_s = now - inst.became_ready_at
            self.worker_members.setdefault(worker.worker_id, set()).add(group.representative)
        self._pending_admission[worker.worker_id] = (
            self._pending_admission.get(worker.worker_id, 0) + 1
        )
        decision = ScheduleDecision(
            worker_id=worker.worker_id,
            signature=batch[0].signature,
            group_keys=[g.key for g in batch],
            utility=utility,
            decided_at=now,
            is_replica=is_replica,
        )
        self.events.emit(
            "decision", now, worker=worker.worker_id, signature=batch[0].signature.digest,
            batch_size=len(batch), utility=utility, replica=is_replica,
            members=[list(g.representative) for g in batch],
        )
        return decision

    def admit(self, decision: ScheduleDecision, now: float) -> AdmittedBatch:
        """Append the committed batch to the worker's admission queue.

        If the worker vanished in between, the decision rolls back to READY
        and WorkerGone is raised.
        """
        worker = self.workers.get(decision.worker_id)
        groups = [self.groups[k] for k in decision.group_keys]
        self._pending_admission[decision.worker_id] = max(
            0, self._pending_admission.get(decision.worker_id, 0) - 1
        )
        if worker is None or not worker.alive or worker.draining:
            self._rollback(decision, now)
            raise WorkerGone(decision.worker_id)
        members = []
        for group in groups:
            rep = group.representative
            inst = self.instances[rep]
            entry = self.perf.require(
                group.op_kind, group.model_ref, worker.descriptor.resource_class
            )
            members.append(
                BatchMember(
                    workflow_id=rep[0], operator_id=rep[1], identity=group.identity,
                    input_hashes=inst.input_hashes,
                    effective_model_mem=self._effective_model_mem(group, entry),
                )
            )
        batch = AdmittedBatch(
            batch_id=self._batch_seq, signature=decision.signature,
            op_kind=groups[0].op_kind, model_ref=groups[0].model_ref,
            resource_class=groups[0].resource_class, members=members,
            decided_at=decision.decided_at, is_replica=decision.is_replica,
        )
        self._batch_seq += 1
        worker.admit(batch)
        self.events.emit(
            "admitted", now, worker=worker.worker_id, batch_id=batch.batch_id,
            batch_size=len(members), signature=decision.signature.digest,
            cold=not worker.cache.is_resident(decision.signature), replica=decision.is_replica,
        )
        return batch

    def _rollback(self, decision: ScheduleDecision, now: float) -> None:
        for gkey in decision.group_keys:
            group = self.groups[gkey]
            group.assignments.pop(decision.worker_id, None)
            self.worker_members.get(decision.worker_id, set()).discard(group.representative)
            if decision.is_replica:
                group.replica_launched = False
                continue
            if group.state != "running":
                continue
            group.state = "pending"
            self.running_groups.discard(gkey)
            self._pool_insert(group)
            for key in group.consumers:
                inst = self.instances[key]
                inst.state = OpState.READY
                inst.assigned_worker = None

    # ------------------------------------------------------------------
    # completion and fan-out
    # ------------------------------------------------------------------

    def on_completion(
        self, worker_id: str, member: MemberKey, output: ContentHash, now: float
    ) -> str:
        """Publish a finished operator and unblock every consumer workflow."""
        inst = self.instances.get(member)
        if inst is None or inst.group_key is None:
            raise UnknownOperator(str(member))
        group = self.groups[inst.group_key]
        self.worker_members.get(worker_id, set()).discard(member)
        if group.state == "completed":
            # Late speculative or duplicate completion: first-wins already paid out.
            self.events.emit(
                "duplicate_completion", now, worker=worker_id,
                workflow=member[0], op=member[1], identity=group.identity.digest,
            )
            edge = self._edge_for(member, group, output, worker_id, now)
            self.cas.publish(group.identity, output, edge)  # records the discard note
            group.assignments.pop(worker_id, None)
            return "duplicate"
        if worker_id not in group.assignments:
            raise UnknownOperator(f"{member} not running on {worker_id}")

        started = group.assignments[worker_id]
        sig_hex = group.signature.digest
        self.duration_samples.setdefault(sig_hex, []).append(now - started)

        edge = self._edge_for(member, group, output, worker_id, now)
        outcome = self.cas.publish(group.identity, output, edge)
        bound = self.cas.lookup_output(group.identity)
        final = bound if bound is not None else output
        if outcome is PublishOutcome.DUPLICATE_DISCARDED:
            # Identity was already bound by an earlier independent run
            # (baselines re-execute); this workflow still gets its edge.
            self.cas.record_lineage(self._edge_for(member, group, final, worker_id, now))
        self.events.emit(
            "publish", now, identity=group.identity.digest, outcome=outcome.value,
            output=final.digest, worker=worker_id,
        )

        group.state = "completed"
        self.running_groups.discard(group.key)
        group.assignments.clear()
        for consumer in group.consumers:
            if consumer == member:
                self._complete_instance(consumer, final, worker_id, now, record_edge=False)
            else:
                self._complete_instance(consumer, final, CACHE_EXECUTOR, now)
        self._maybe_propagate_cache_completions(now)
        return "completed"

    def _edge_for(
        self, member: MemberKey, group: DedupGroup, produced: ContentHash,
        executed_by: str, now: float,
    ) -> LineageEdge:
        inst = self.instances[member]
        return LineageEdge(
            workflow_id=member[0], operator_id=member[1], task_identity=group.identity,
            consumed=inst.input_hashes, produced=produced, executed_by=executed_by,
            completed_at=now,
        )

    def _complete_instance(
        self, key: MemberKey, produced: ContentHash, executed_by: str, now: float,
        record_edge: bool = True,
    ) -> None:
        inst = self.instances[key]
        wf = self.workflows[key[0]]
        if record_edge:
            if inst.group_key is not None and inst.group_key in self.groups:
                identity = self.groups[inst.group_key].identity
            else:
                identity = inst.identity
            self.cas.record_lineage(
                LineageEdge(
                    workflow_id=key[0], operator_id=key[1], task_identity=identity,
                    consumed=inst.input_hashes, produced=produced,
                    executed_by=executed_by, completed_at=now,
                )
            )
        inst.state = OpState.COMPLETED
        inst.assigned_worker = None
        wf.produced[key[1]] = produced
        wf.completed_ops.add(key[1])
        self.events.emit(
            "op_completed", now, workflow=key[0], op=key[1],
            via="cache" if executed_by == CACHE_EXECUTOR else "exec",
            worker=executed_by, output=produced.digest,
            queue_wait_s=inst.queue_wait_s,
        )
        self._unblock_downstream(key, now)
        self._check_workflow_done(key[0], now)

    def _unblock_downstream(self, key: MemberKey, now: float) -> None:
        wf = self.workflows[key[0]]
        newly_ready = []
        for succ in wf.dag.successors[key[1]]:
            skey = (key[0], succ)
            if self.instances[skey].state is not OpState.BLOCKED:
                continue
            if all(p in wf.completed_ops for p in wf.dag.predecessors[succ]):
                newly_ready.append(skey)
        if newly_ready:
            self.deduplicate(sorted(newly_ready), now)

    def _maybe_propagate_cache_completions(self, now: float) -> None:
        # Cache completions can unblock chains; deduplicate() recurses via
        # _complete_instance, so nothing extra is needed here. Kept as an
        # explicit hook for the MF policy, which tracks whole workflows.
        if self.policy == POLICY_MF:
            for wf_id in list(self.mf_assignment):
                rec = self.workflows[wf_id]
                if rec.completed_at is not None or rec.failed is not None:
                    worker_id = self.mf_assignment.pop(wf_id)
                    self.mf_worker_of.pop(worker_id, None)

    def _check_workflow_done(self, wf_id: str, now: float) -> None:
        rec = self.workflows[wf_id]
        if rec.completed_at is not None or rec.failed is not None:
            return
        if len(rec.completed_ops) == len(rec.dag.nodes):
            rec.completed_at = now
            self.events.emit(
                "workflow_completed", now, workflow=wf_id,
                latency_s=now - rec.submitted_at,
            )

    # ------------------------------------------------------------------
    # failures, misfits, watchdog
    # ------------------------------------------------------------------

    def on_worker_failure(self, worker_id: str, now: float) -> list[MemberKey]:
        """Return every RUNNING operator held by the worker to READY."""
        worker = self.workers.get(worker_id)
        if worker is None:
            raise UnknownWorker(worker_id)
        members = sorted(self.worker_members.pop(worker_id, set()))
        if worker.retired_at is None:
            worker.crash(now)
        self.workers.pop(worker_id, None)
        self.retired_workers.append(worker)
        self.events.emit(
            "worker_removed", now, worker=worker_id,
            energy_joules=worker.energy_joules, cost_usd=worker.cost_usd(now),
            provisioned_at=worker.descriptor.provisioned_at,
        )
        requeued: list[MemberKey] = []
        for member in members:
            inst = self.instances[member]
            group = self.groups.get(inst.group_key)
            if group is None or group.state == "completed":
                continue
            group.assignments.pop(worker_id, None)
            if group.assignments:
                continue  # a speculative replica is still running it
            cached = self.cas.lookup_output(group.identity) if self.dedup_enabled else None
            if cached is not None:
                group.state = "completed"
                self.running_groups.discard(group.key)
                for consumer in group.consumers:
                    self._complete_instance(consumer, cached, CACHE_EXECUTOR, now)
                continue
            group.state = "pending"
            group.replica_launched = False
            self.running_groups.discard(group.key)
            self._pool_insert(group)
            for consumer in group.consumers:
                cinst = self.instances[consumer]
                cinst.state = OpState.READY
                cinst.assigned_worker = None
                cinst.attempt_count += 1
                cinst.became_ready_at = now
            requeued.append(group.representative)
        if self.policy == POLICY_MF:
            for wf_id, wid in list(self.mf_assignment.items()):
                if wid == worker_id:
                    self.mf_assignment.pop(wf_id)
                    self.mf_worker_of.pop(wid, None)
                    self.mf_pending.append(wf_id)
            self.mf_pending.sort(key=lambda w: (self.workflows[w].submitted_at, w))
        self.events.emit("requeued", now, worker=worker_id,
                         members=[list(m) for m in requeued])
        return requeued

    def watchdog_tick(self, now: float) -> list[str]:
        """Declare failed any worker silent for more than the watchdog period."""
        failed = []
        for wid in sorted(self.workers):
            worker = self.workers[wid]
            if now - worker.last_heartbeat > self.limits.watchdog_s:
                silenced = worker.last_heartbeat
                self.events.emit(
                    "worker_failed", now, worker=wid,
                    silenced_at=silenced, detected_at=now,
                )
                self.detections.append(
                    {"worker": wid, "silenced_at": silenced, "detected_at": now}
                )
                self.on_worker_failure(wid, now)
                failed.append(wid)
        return failed

    def handle_resource_misfit(self, report: MisfitReport, now: float) -> None:
        """Raise the operator's memory requirement and resubmit it."""
        inst = self.instances.get(report.member)
        if inst is None or inst.group_key is None:
            raise UnknownOperator(str(report.member))
        group = self.groups[inst.group_key]
        corrected = int(report.observed_bytes * (1.0 + self.limits.misfit_margin_frac))
        self.worker_members.get(report.worker_id, set()).discard(report.member)
        group.assignments.pop(report.worker_id, None)
        for consumer in group.consumers:
            self.instances[consumer].corrected_mem = corrected
        self.events.emit(
            "misfit_reported", now, worker=report.worker_id,
            workflow=report.member[0], op=report.member[1],
            observed_bytes=report.observed_bytes, corrected_bytes=corrected,
        )
        if not self._fleet_can_satisfy(corrected):
            for consumer in group.consumers:
                rec = self.workflows[consumer[0]]
                if rec.failed is None:
                    rec.failed = "NoCapableWorker"
                    self.events.emit("workflow_failed", now, workflow=consumer[0],
                                     error="NoCapableWorker")
            group.state = "completed"  # terminal: nothing further to schedule
            self.running_groups.discard(group.key)
            raise NoCapableWorker(f"corrected requirement {corrected} bytes")
        group.state = "pending"
        self.running_groups.discard(group.key)
        self._pool_insert(group)
        for consumer in group.consumers:
            cinst = self.instances[consumer]
            cinst.state = OpState.READY
            cinst.attempt_count += 1
            cinst.assigned_worker = None
            cinst.became_ready_at = now

    def fail_unresolvable(self, member: MemberKey, missing: ContentHash, now: float) -> None:
        """Terminal failure: a batch input hash resolves nowhere."""
        inst = self.instances.get(member)
        if inst is None or inst.group_key is None:
            raise UnknownOperator(str(member))
        group = self.groups[inst.group_key]
        self.events.emit("input_unavailable", now, workflow=member[0], op=member[1],
                         missing=missing.digest)
        group.state = "completed"
        self.running_groups.discard(group.key)
        group.assignments.clear()
        for members in self.worker_members.values():
            members.discard(group.representative)
        for consumer in group.consumers:
            rec = self.workflows[consumer[0]]
            if rec.failed is None:
                rec.failed = "InputUnavailable"
                self.events.emit("workflow_failed", now, workflow=consumer[0],
                                 error="InputUnavailable")

    def _fleet_can_satisfy(self, mem_bytes: int) -> bool:
        vrams = [w.descriptor.vram_bytes for w in self.workers.values()]
        if self.ablation.elasticity and self.policy == POLICY_FLOWMESH:
            vrams.extend(t.vram_bytes for t in self.templates)
        return any(v >= mem_bytes for v in vrams)

    # ------------------------------------------------------------------
    # autoscaling and speculation
    # ------------------------------------------------------------------

    def _capable_of(self, group: DedupGroup, rclass: ResourceClass, vram: int) -> bool:
        entry = self.perf.entry(group.op_kind, group.model_ref, rclass)
        if entry is None or not class_satisfies(rclass, group.resource_class):
            return False
        return self._effective_model_mem(group, entry) + entry.per_item_mem_bytes <= vram

    def autoscale_tick(self, now: float) -> tuple[list[str], list[str]]:
        """Queue-depth scaling: provision for starved signatures, retire idle."""
        if not (self.policy == POLICY_FLOWMESH and self.ablation.elasticity):
            return [], []
        provisioned: list[str] = []
        retired: list[str] = []
        fleet_size = len(self.workers)
        for sig_hex in sorted(self.pool):
            entries = self.pool[sig_hex]
            if not entries:
                continue
            group = self.groups[entries[0][1]]
            pending = len(entries)
            capacity = sum(
                1
                for w in self.workers.values()
                if w.retired_at is None and w.alive and not w.draining
                and self._capable_of(group, w.descriptor.resource_class,
                                     w.descriptor.vram_bytes)
            )
            starved = capacity == 0 or pending / capacity > self.limits.scale_up_ratio
            if not starved:
                self._scale_flags.pop(sig_hex, None)
                continue
            if not self._scale_flags.get(sig_hex, False):
                self._scale_flags[sig_hex] = True  # must persist one full tick
                continue
            self._scale_flags.pop(sig_hex, None)
            if fleet_size >= self.limits.fleet_max:
                continue
            candidates = [
                t for t in self.templates
                if self._capable_of(group, t.resource_class, t.vram_bytes)
            ]
            if not candidates:
                continue
            template = min(candidates, key=lambda t: (t.cost_rate, t.resource_class.value))
            worker = self.provision_worker(template, now)
            self.events.emit(
                "scale_up", now, worker=worker.worker_id,
                resource_class=template.resource_class.value, signature=sig_hex,
                pending=pending, capacity=capacity,
            )
            provisioned.append(worker.worker_id)
            fleet_size += 1
        # retire: most expensive idle workers first, never below the floor
        idle = [
            w for w in self.workers.values()
            if w.usable(now) and w.current is None and not w.queue
            and now - w.idle_since >= self.limits.idle_timeout_s
        ]
        idle.sort(key=lambda w: (-w.descriptor.cost_rate, w.worker_id))
        for worker in idle:
            if len(self.workers) <= self.limits.fleet_floor:
                break
            worker.drain()
            self._retire_worker(worker, now, reason="idle")
            self.events.emit("scale_down", now, worker=worker.worker_id,
                             idle_s=now - worker.idle_since)
            retired.append(worker.worker_id)
        return provisioned, retired

    def _p95(self, samples: list[float]) -> float:
        ordered = sorted(samples)
        idx = max(0, math.ceil(0.95 * len(ordered)) - 1)
        return ordered[idx]

    def speculate(self, now: float) -> list[ScheduleDecision]:
        """Launch at most one replica for each straggling RUNNING operator."""
        if self.policy != POLICY_FLOWMESH:
            return []
        launches: list[ScheduleDecision] = []
        for gkey in sorted(self.running_groups):
            group = self.groups[gkey]
            if group.replica_launched or not group.assignments:
                continue
            samples = self.duration_samples.get(group.signature.digest, [])
            if len(samples) < self.limits.speculation_min_samples:
                continue
            threshold = self.limits.speculation_factor * self._p95(samples)
            elapsed = now - min(group.assignments.values())
            if elapsed <= threshold:
                continue
            best: tuple | None = None
            for wid in sorted(self.workers):
                worker = self.workers[wid]
                if wid in group.assignments or not worker.usable(now):
                    continue
                if self._outstanding(worker) >= self.limits.max_outstanding_batches:
                    continue
                if not self.feasible(worker, [group]):
                    continue
                utility = self.estimate_utility(worker, [group], now=now)
                cand = (-utility, wid, worker)
                if best is None or cand[:2] < best[:2]:
                    best = cand
            if best is None:
                continue
            worker = best[2]
            group.replica_launched = True
            decision = self._commit(worker, [group], -best[0], now, is_replica=True)
            self.events.emit(
                "replica_launched", now, workflow=group.representative[0],
                op=group.representative[1], worker=worker.worker_id,
                elapsed_s=elapsed, threshold_s=threshold,
            )
            launches.append(decision)
        return launches

    # ------------------------------------------------------------------
    # invariants and views
    # ------------------------------------------------------------------

    def all_done(self) -> bool:
        return all(
            rec.completed_at is not None or rec.failed is not None
            for rec in self.workflows.values()
        )

    def has_pending_work(self) -> bool:
        if any(self.pool.values()) or self.running_groups:
            return True
        return any(w.outstanding_batches() for w in self.workers.values())

    def check_conservation(self) -> None:
        """Every submitted operator sits in exactly one lifecycle state."""
        for key, inst in self.instances.items():
            wf = self.workflows[key[0]]
            if wf.failed is not None:
                continue
            if inst.state is OpState.COMPLETED:
                assert key[1] in wf.completed_ops, f"{key} completed but not recorded"
            elif inst.state is OpState.RUNNING:
                group = self.groups.get(inst.group_key)
                assert group is not None and group.state == "running" and group.assignments, (
                    f"{key} RUNNING without an active assignment"
                )
            elif inst.state is OpState.READY:
                group = self.groups.get(inst.group_key)
                assert group is not None and group.state == "pending", (
                    f"{key} READY without a pending group"
                )
            else:  # BLOCKED
                assert any(
                    p not in wf.completed_ops for p in wf.dag.predecessors[key[1]]
                ), f"{key} BLOCKED with all predecessors complete"

    def ready_count(self) -> int:
        return sum(len(v) for v in self.pool.values())

    def running_count(self) -> int:
        return len(self.running_groups)
