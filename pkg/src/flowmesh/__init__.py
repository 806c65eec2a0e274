"""flowmesh: multi-tenant LLM workflow fabric with a deterministic simulator.

Tenant workflows compile into operator DAGs; a global control plane
deduplicates identical work across tenants, batches compatible operators,
places batches on heterogeneous workers by a scalar utility, and executes on
an elastic fleet of stateless workers backed by a content-addressable store.
"""

__version__ = "0.1.0"

from .cas import Artifact, ArtifactKind, CASStore, LineageEdge, PublishOutcome
from .control import (
    Ablation,
    ControlPlane,
    DedupGroup,
    OpState,
    ScheduleDecision,
    UtilityWeights,
)
from .identity import (
    ContentHash,
    ExecSignature,
    TaskIdentity,
    canonicalize_params,
    content_hash,
    exec_signature,
    task_identity,
)
from .metrics import MetricsReport, compute_metrics
from .perf import PerfEntry, PerfModel
from .simulator import RunResult, ScenarioConfig, Simulation, run_scenario, validate_config
from .workers import Worker, WorkerDescriptor
from .workflow import (
    OperatorKind,
    OperatorSpec,
    ResourceClass,
    WorkflowDag,
    compile_workflow,
    ready_frontier,
)
from .workload import ArrivalSpec, generate_workload

__all__ = [
    "Ablation",
    "Artifact",
    "ArtifactKind",
    "ArrivalSpec",
    "CASStore",
    "ContentHash",
    "ControlPlane",
    "DedupGroup",
    "ExecSignature",
    "LineageEdge",
    "MetricsReport",
    "OperatorKind",
    "OperatorSpec",
    "OpState",
    "PerfEntry",
    "PerfModel",
    "PublishOutcome",
    "ResourceClass",
    "RunResult",
    "ScenarioConfig",
    "ScheduleDecision",
    "Simulation",
    "TaskIdentity",
    "UtilityWeights",
    "Worker",
    "WorkerDescriptor",
    "WorkflowDag",
    "canonicalize_params",
    "compile_workflow",
    "compute_metrics",
    "content_hash",
    "exec_signature",
    "generate_workload",
    "ready_frontier",
    "run_scenario",
    "task_identity",
    "validate_config",
]
