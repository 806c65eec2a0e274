"""Shared fixtures-in-functions for the test suite."""

from flowmesh.cas import CASStore
from flowmesh.control import Ablation, ControlPlane, UtilityWeights
from flowmesh.defaults import GiB, SimLimits, WORKER_TEMPLATES, WorkerTemplate
from flowmesh.identity import content_hash, task_identity
from flowmesh.perf import PerfModel
from flowmesh.workers import AdmittedBatch, BatchMember, Worker, WorkerDescriptor
from flowmesh.workflow import OperatorKind, ResourceClass

MODEL = "m@v1"


def perf_records(
    base=2.0, per_item=1.0, alpha=0.5, load=5.0, footprint_gib=10,
    per_item_mem_gib=1, output_bytes=1024, kinds=("inference",), models=(MODEL,),
):
    rows = []
    for kind in kinds:
        for model in models:
            for rclass in ResourceClass:
                rows.append({
                    "op_kind": kind, "model_ref": model, "resource_class": rclass.value,
                    "base_latency_s": base, "per_item_latency_s": per_item, "alpha": alpha,
                    "load_time_s": load, "mem_footprint_bytes": footprint_gib * GiB,
                    "per_item_mem_bytes": per_item_mem_gib * GiB,
                    "output_bytes": output_bytes,
                })
    return rows


def simple_perf(**kwargs) -> PerfModel:
    return PerfModel.from_records(perf_records(**kwargs))


def make_worker(
    cas: CASStore,
    perf: PerfModel,
    worker_id="w-000",
    rclass=ResourceClass.RTX4090_48G,
    limits: SimLimits | None = None,
    provisioned_at=0.0,
    cost_rate=1.0,
    idle_w=100.0,
    peak_w=500.0,
    visibility="shared",
) -> Worker:
    template = WORKER_TEMPLATES[rclass]
    desc = WorkerDescriptor(
        worker_id=worker_id, resource_class=rclass, vram_bytes=template.vram_bytes,
        arch_generation=template.arch_generation, cost_rate=cost_rate,
        idle_power_watts=idle_w, peak_power_watts=peak_w,
        provisioned_at=provisioned_at, tenant_visibility=visibility,
    )
    return Worker(desc, perf, cas, limits or SimLimits())


def make_batch(
    cas: CASStore,
    n=1,
    batch_id=0,
    kind=OperatorKind.INFERENCE,
    model=MODEL,
    rclass=ResourceClass.RTX4090_48G,
    wf="wf-1",
    inputs_per_member=1,
    model_mem=10 * GiB,
    decided_at=0.0,
) -> AdmittedBatch:
    members = []
    signature = None
    for i in range(n):
        input_hashes = tuple(
            cas.put(f"{wf}-in-{batch_id}-{i}-{j}".encode())
            for j in range(inputs_per_member)
        )
        identity = task_identity(content_hash(model.encode()), {"i": i, "b": batch_id},
                                 input_hashes)
        members.append(BatchMember(
            workflow_id=wf, operator_id=f"n{i:02d}", identity=identity,
            input_hashes=input_hashes, effective_model_mem=model_mem,
        ))
    from flowmesh.identity import exec_signature

    signature = exec_signature(content_hash(model.encode()), {}, rclass.value)
    return AdmittedBatch(
        batch_id=batch_id, signature=signature, op_kind=kind, model_ref=model,
        resource_class=rclass, members=members, decided_at=decided_at,
    )


class PlaneBuilder:
    """Compact builder for control-plane test scenes."""

    def __init__(self, tmp_path, policy="flowmesh", weights=None, limits=None,
                 ablation=None, tenant_rules=None, perf=None, templates=()):
        self.cas = CASStore(tmp_path / "cas")
        self.perf = perf or simple_perf()
        self.limits = limits or SimLimits()
        self.plane = ControlPlane(
            cas=self.cas, perf=self.perf, limits=self.limits,
            weights=weights or UtilityWeights(), policy=policy,
            ablation=ablation or Ablation(), tenant_rules=tenant_rules or {},
            templates=list(templates) or [WORKER_TEMPLATES[ResourceClass.RTX4090_48G]],
        )

    def add_worker(self, worker_id="w-000", rclass=ResourceClass.RTX4090_48G,
                   cost_rate=1.0, visibility="shared", **kwargs) -> Worker:
        worker = make_worker(self.cas, self.perf, worker_id=worker_id, rclass=rclass,
                             limits=self.limits, cost_rate=cost_rate,
                             visibility=visibility, **kwargs)
        self.plane.register_worker(worker)
        return worker

    def external(self, payload: bytes) -> str:
        return self.cas.put(payload).digest


def pump(plane, now=0.0, max_steps=10_000):
    """Synchronous mini-loop: schedule, execute, complete until quiescent.

    Returns the virtual time when the system went idle.
    """
    from flowmesh.control import MisfitReport
    from flowmesh.errors import NoCapableWorker, WorkerGone

    clock = now
    for _ in range(max_steps):
        for decision in plane.schedule_step(clock):
            try:
                plane.admit(decision, clock)
            except WorkerGone:
                continue
        for wid in sorted(plane.workers):
            plane.workers[wid].maybe_start(clock)
        running = [
            (w.current.info.finish_t, wid)
            for wid, w in sorted(plane.workers.items())
            if w.current is not None
        ]
        if not running:
            break
        finish, wid = min(running)
        clock = max(clock, finish)
        worker = plane.workers[wid]
        if worker.current.info.misfit:
            observed = worker.current.info.observed_mem_bytes
            batch = worker.abort_misfit(clock)
            for member in batch.members:
                try:
                    plane.handle_resource_misfit(
                        MisfitReport(wid, (member.workflow_id, member.operator_id), observed),
                        clock,
                    )
                except NoCapableWorker:
                    pass
        else:
            for member, output in worker.complete_current(clock):
                plane.on_completion(
                    wid, (member.workflow_id, member.operator_id), output, clock
                )
    return clock


def submit_doc(plane, doc, now=0.0):
    from flowmesh.workflow import compile_workflow

    return plane.submit_workflow(compile_workflow(doc, submit_time=now), now)


def workflow_doc(wf_id, nodes, tenant="tenant-0"):
    return {"workflow_id": wf_id, "tenant_id": tenant, "nodes": nodes}


def inference_node(ext_hash, params=None, model=MODEL, rclass="class_4090_48g",
                   upstream=None):
    inputs = []
    slot = 0
    if ext_hash is not None:
        inputs.append({"external_hash": ext_hash, "slot": slot})
        slot += 1
    if upstream:
        for up in upstream:
            inputs.append({"from": up, "slot": slot})
            slot += 1
    return {
        "op_kind": "inference", "model_ref": model, "params": params or {},
        "inputs": inputs, "resource_class": rclass,
    }
