"""Baseline placement policies for scenario comparison.

    MF: monolithic first-fit -- a whole workflow lands on the first worker
        able to run all of its operators, one workflow per worker at a time.
    DS: decompose + static routing -- training kinds go to the designated
        training workers, everything else to inference workers, regardless
        of who is idle.
    DR: decompose + round-robin across all workers.

None of these deduplicate or consolidate: every operator runs as its own
singleton batch, and worker queues are unbounded (static-system behavior).
"""

from __future__ import annotations

from .control import (
    POLICY_DR,
    POLICY_DS,
    POLICY_MF,
    ControlPlane,
    DedupGroup,
    ScheduleDecision,
)
from .workers import Worker
from .workflow import TRAINING_KINDS, class_satisfies


def step(plane: ControlPlane, now: float) -> list[ScheduleDecision]:
    if plane.policy == POLICY_MF:
        return _mf_step(plane, now)
    if plane.policy == POLICY_DS:
        return _ds_step(plane, now)
    if plane.policy == POLICY_DR:
        return _dr_step(plane, now)
    raise ValueError(plane.policy)


def _pending_groups(plane: ControlPlane) -> list[DedupGroup]:
    """All pending singleton groups in global FCFS order."""
    groups = [plane.groups[gkey] for entries in plane.pool.values() for _, gkey in entries]
    groups.sort(key=lambda g: g.fcfs_key)
    return groups


# --- MF: monolithic + first-fit ------------------------------------------


def _workflow_fits(plane: ControlPlane, worker: Worker, wf_id: str) -> bool:
    dag = plane.workflows[wf_id].dag
    for spec in dag.nodes.values():
        entry = plane.perf.entry(spec.op_kind, spec.model_ref, worker.descriptor.resource_class)
        if entry is None:
            return False
        mem = spec.params.get("mem_bytes")
        model_mem = mem if isinstance(mem, int) and mem > 0 else entry.mem_footprint_bytes
        if model_mem + entry.per_item_mem_bytes > worker.descriptor.vram_bytes:
            return False
        if not class_satisfies(worker.descriptor.resource_class, spec.resource_class):
            return False
    return True


def _mf_step(plane: ControlPlane, now: float) -> list[ScheduleDecision]:
    decisions: list[ScheduleDecision] = []
    # Assign whole queued workflows to free workers, first fit in id order.
    for wid in sorted(plane.workers):
        worker = plane.workers[wid]
        if not worker.usable(now) or wid in plane.mf_worker_of:
            continue
        for wf_id in list(plane.mf_pending):
            if _workflow_fits(plane, worker, wf_id):
                plane.mf_pending.remove(wf_id)
                plane.mf_assignment[wf_id] = wid
                plane.mf_worker_of[wid] = wf_id
                plane.events.emit("mf_assigned", now, workflow=wf_id, worker=wid)
                break
    # Stream each assigned workflow's ready operators to its own worker.
    for group in _pending_groups(plane):
        wf_id = group.representative[0]
        wid = plane.mf_assignment.get(wf_id)
        if wid is None or wid not in plane.workers:
            continue
        worker = plane.workers[wid]
        if plane.feasible(worker, [group]):
            decisions.append(plane._commit(worker, [group], 0.0, now))
    return decisions


# --- DS: decompose + static routing --------------------------------------


def _designations(plane: ControlPlane) -> tuple[list[str], list[str]]:
    """Largest-VRAM class hosts training; everyone else hosts inference."""
    workers = sorted(plane.workers)
    if not workers:
        return [], []
    max_vram = max(plane.workers[w].descriptor.vram_bytes for w in workers)
    train = [w for w in workers if plane.workers[w].descriptor.vram_bytes == max_vram]
    infer = [w for w in workers if w not in train] or train
    return train, infer


def _ds_step(plane: ControlPlane, now: float) -> list[ScheduleDecision]:
    decisions: list[ScheduleDecision] = []
    train, infer = _designations(plane)
    for group in _pending_groups(plane):
        lane = "train" if group.op_kind in TRAINING_KINDS else "infer"
        order = train if lane == "train" else infer
        if not order:
            continue
        ptr = plane._ds_pointers[lane]
        for offset in range(len(order)):
            wid = order[(ptr + offset) % len(order)]
            worker = plane.workers[wid]
            if not worker.usable(now) or not plane.feasible(worker, [group]):
                continue
            plane._ds_pointers[lane] = (ptr + offset + 1) % len(order)
            decisions.append(plane._commit(worker, [group], 0.0, now))
            break
    return decisions


# --- DR: decompose + round-robin ------------------------------------------


def _dr_step(plane: ControlPlane, now: float) -> list[ScheduleDecision]:
    decisions: list[ScheduleDecision] = []
    order = sorted(plane.workers)
    if not order:
        return decisions
    for group in _pending_groups(plane):
        ptr = plane._dr_pointer % len(order)
        for offset in range(len(order)):
            wid = order[(ptr + offset) % len(order)]
            worker = plane.workers[wid]
            if not worker.usable(now) or not plane.feasible(worker, [group]):
                continue
            plane._dr_pointer = (ptr + offset + 1) % len(order)
            decisions.append(plane._commit(worker, [group], 0.0, now))
            break
    return decisions
