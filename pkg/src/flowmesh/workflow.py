"""Workflow DAGs: operator specs, compilation from JSON documents, frontiers.

A workflow document is UTF-8 JSON:

    {"workflow_id": ..., "tenant_id": ...,
     "nodes": {id: {"op_kind", "model_ref", "params", "resource_class",
                    "inputs": [{"from"|"external_hash", "slot"}, ...],
                    "slo_hint"?}}}

All digests are lowercase hex. Graphs are fixed at compile time; there is no
mutation after submission.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import ArityMismatch, CycleDetected, DanglingEdge, SchemaError, UnsupportedValue
from .identity import (
    ContentHash,
    ExecSignature,
    TaskIdentity,
    canonicalize_params,
    exec_signature,
    model_hash_for_ref,
    task_identity,
)


class OperatorKind(str, Enum):
    INFERENCE = "inference"
    SFT = "sft"
    DPO = "dpo"
    PPO = "ppo"
    EVAL = "eval"
    DATA_PREP = "data_prep"
    TOOL_CALL = "tool_call"

    def __str__(self) -> str:  # plain value in logs and hashes
        return self.value


class ResourceClass(str, Enum):
    H100_94G = "class_h100_94g"
    RTX4090_48G = "class_4090_48g"
    RTX4090_24G = "class_4090_24g"

    def __str__(self) -> str:
        return self.value


# Minimum capability implied by each class requirement: a worker satisfies a
# requirement when its generation and VRAM are at least these.
CLASS_SPECS: dict[ResourceClass, tuple[int, int]] = {
    # class -> (arch_generation, vram_bytes)
    ResourceClass.H100_94G: (9, 94 * 2**30),
    ResourceClass.RTX4090_48G: (8, 48 * 2**30),
    ResourceClass.RTX4090_24G: (8, 24 * 2**30),
}

TRAINING_KINDS = frozenset({OperatorKind.SFT, OperatorKind.DPO, OperatorKind.PPO})


def class_satisfies(worker_class: ResourceClass, required: ResourceClass) -> bool:
    """True when a worker of `worker_class` meets the `required` class floor."""
    have_gen, have_vram = CLASS_SPECS[worker_class]
    need_gen, need_vram = CLASS_SPECS[required]
    return have_gen >= need_gen and have_vram >= need_vram


@dataclass(frozen=True)
class InputRef:
    """One positional input: either an upstream operator or an external artifact."""

    slot: int
    from_op: str | None = None
    external: ContentHash | None = None

    def __post_init__(self) -> None:
        if (self.from_op is None) == (self.external is None):
            raise SchemaError("input must reference exactly one of from/external_hash")


@dataclass(frozen=True)
class OperatorSpec:
    """A single schedulable stage of a workflow."""

    op_kind: OperatorKind
    model_ref: str
    params: Mapping[str, Any]
    inputs: tuple[InputRef, ...]
    resource_class: ResourceClass
    tenant_id: str
    slo_hint: float | None = None

    def model_hash(self) -> ContentHash:
        return model_hash_for_ref(self.model_ref)

    def identity(self, input_hashes: Iterable[ContentHash]) -> TaskIdentity:
        return task_identity(self.model_hash(), self.params, input_hashes)

    def signature(self) -> ExecSignature:
        return exec_signature(self.model_hash(), self.params, self.resource_class.value)


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    slot: int


@dataclass
class WorkflowDag:
    workflow_id: str
    tenant_id: str
    nodes: dict[str, OperatorSpec]
    edges: list[Edge]
    submit_time: float = 0.0
    predecessors: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)
    successors: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)

    def source_ops(self) -> list[str]:
        """Operators with no upstream producers (external inputs only)."""
        return sorted(op for op in self.nodes if not self.predecessors[op])


def _parse_inputs(op_id: str, raw: Any) -> tuple[InputRef, ...]:
    if not isinstance(raw, list):
        raise SchemaError(f"node {op_id}: inputs must be a list")
    refs = []
    for item in raw:
        if not isinstance(item, Mapping) or "slot" not in item:
            raise SchemaError(f"node {op_id}: each input needs a slot")
        slot = item["slot"]
        if not isinstance(slot, int) or slot < 0:
            raise ArityMismatch(f"node {op_id}: slot {slot!r} is not a non-negative integer")
        if "from" in item:
            refs.append(InputRef(slot=slot, from_op=str(item["from"])))
        elif "external_hash" in item:
            refs.append(InputRef(slot=slot, external=ContentHash(str(item["external_hash"]).lower())))
        else:
            raise SchemaError(f"node {op_id}: input needs 'from' or 'external_hash'")
    slots = sorted(r.slot for r in refs)
    if slots != list(range(len(refs))):
        raise ArityMismatch(f"node {op_id}: slots {slots} do not cover 0..{len(refs) - 1}")
    return tuple(sorted(refs, key=lambda r: r.slot))


def compile_workflow(document: Mapping[str, Any] | str, submit_time: float = 0.0) -> WorkflowDag:
    """Validate a workflow document and build its DAG.

    Raises SchemaError (also CycleDetected / DanglingEdge / ArityMismatch
    subclasses) on any structural defect.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"workflow document is not valid JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise SchemaError("workflow document must be a JSON object")

    for key in ("workflow_id", "tenant_id", "nodes"):
        if key not in document:
            raise SchemaError(f"workflow document missing {key!r}")
    workflow_id = str(document["workflow_id"])
    tenant_id = str(document["tenant_id"])
    raw_nodes = document["nodes"]
    if not isinstance(raw_nodes, Mapping) or not raw_nodes:
        raise SchemaError("nodes must be a non-empty object")

    nodes: dict[str, OperatorSpec] = {}
    for op_id, raw in raw_nodes.items():
        if not isinstance(raw, Mapping):
            raise SchemaError(f"node {op_id}: must be an object")
        try:
            kind = OperatorKind(raw.get("op_kind"))
        except ValueError:
            raise SchemaError(f"node {op_id}: unknown op_kind {raw.get('op_kind')!r}") from None
        try:
            rclass = ResourceClass(raw.get("resource_class"))
        except ValueError:
            raise SchemaError(
                f"node {op_id}: unknown resource_class {raw.get('resource_class')!r}"
            ) from None
        model_ref = raw.get("model_ref")
        if not isinstance(model_ref, str) or not model_ref:
            raise SchemaError(f"node {op_id}: model_ref must be a non-empty string")
        params = raw.get("params", {})
        if not isinstance(params, Mapping):
            raise SchemaError(f"node {op_id}: params must be an object")
        try:
            canonicalize_params(params)
        except UnsupportedValue as exc:
            raise SchemaError(f"node {op_id}: {exc}") from exc
        slo = raw.get("slo_hint")
        if slo is not None and not isinstance(slo, (int, float)):
            raise SchemaError(f"node {op_id}: slo_hint must be a number")
        nodes[op_id] = OperatorSpec(
            op_kind=kind,
            model_ref=model_ref,
            params=dict(params),
            inputs=_parse_inputs(op_id, raw.get("inputs", [])),
            resource_class=rclass,
            tenant_id=tenant_id,
            slo_hint=float(slo) if slo is not None else None,
        )

    edges: list[Edge] = []
    for op_id, spec in nodes.items():
        for ref in spec.inputs:
            if ref.from_op is not None:
                if ref.from_op not in nodes:
                    raise DanglingEdge(f"node {op_id}: input references missing node {ref.from_op!r}")
                edges.append(Edge(producer=ref.from_op, consumer=op_id, slot=ref.slot))

    dag = WorkflowDag(
        workflow_id=workflow_id,
        tenant_id=tenant_id,
        nodes=nodes,
        edges=edges,
        submit_time=submit_time,
    )
    preds: dict[str, list[str]] = {op: [] for op in nodes}
    succs: dict[str, list[str]] = {op: [] for op in nodes}
    for edge in edges:
        preds[edge.consumer].append(edge.producer)
        succs[edge.producer].append(edge.consumer)
    dag.predecessors = {op: tuple(sorted(set(v))) for op, v in preds.items()}
    dag.successors = {op: tuple(sorted(set(v))) for op, v in succs.items()}

    topological_order(dag)  # raises CycleDetected
    return dag


def topological_order(dag: WorkflowDag) -> list[str]:
    """Kahn's algorithm; deterministic (ascending id within each layer)."""
    indegree = {op: len(dag.predecessors[op]) for op in dag.nodes}
    frontier = sorted(op for op, d in indegree.items() if d == 0)
    order: list[str] = []
    while frontier:
        op = frontier.pop(0)
        order.append(op)
        changed = False
        for succ in dag.successors[op]:
            indegree[succ] -= 1
            if indegree[succ] == 0:
                frontier.append(succ)
                changed = True
        if changed:
            frontier.sort()
    if len(order) != len(dag.nodes):
        stuck = sorted(op for op, d in indegree.items() if d > 0)
        raise CycleDetected(f"cycle through nodes {stuck}")
    return order


def ready_frontier(
    dag: WorkflowDag,
    completed: Iterable[str],
    running: Iterable[str] = (),
) -> list[str]:
    """Operators whose every producer completed and which are not yet
    completed or running themselves, in ascending id order."""
    done = set(completed)
    busy = set(running)
    return sorted(
        op
        for op in dag.nodes
        if op not in done
        and op not in busy
        and all(p in done for p in dag.predecessors[op])
    )
