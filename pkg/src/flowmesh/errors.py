"""Typed errors shared across the fabric."""


class FlowMeshError(Exception):
    """Base class for all fabric errors."""


# --- parameter canonicalization / identity ---

class UnsupportedValue(FlowMeshError):
    """Parameter map contains a value outside the canonical-encoding domain."""


# --- workflow compilation ---

class SchemaError(FlowMeshError):
    """Workflow or scenario document violates the expected schema."""


class CycleDetected(SchemaError):
    """Workflow graph contains a cycle."""


class DanglingEdge(SchemaError):
    """Edge references an operator id that does not exist."""


class ArityMismatch(SchemaError):
    """Input slot indices do not form a dense 0..n-1 range."""


# --- content-addressable store ---

class StorageFull(FlowMeshError):
    """Configured byte capacity would be exceeded."""


class NotFound(FlowMeshError):
    """No artifact stored under the requested hash."""


class IntegrityError(FlowMeshError):
    """Stored bytes no longer re-hash to their address."""


class MissingArtifact(FlowMeshError):
    """Publish referenced an output hash that was never put."""


class UnknownWorkflow(FlowMeshError):
    """No lineage recorded for the requested workflow."""


# --- control plane ---

class DuplicateWorkflowId(FlowMeshError):
    """A workflow with this id was already submitted."""


class InfeasiblePair(FlowMeshError):
    """Utility was requested for a (worker, batch) pair that fails feasibility."""


class WorkerGone(FlowMeshError):
    """Target worker retired or failed before the admission landed."""


class UnknownOperator(FlowMeshError):
    """Completion or failure report references an operator the plane is not tracking."""


class UnknownWorker(FlowMeshError):
    """Report references a worker that is not registered."""


class NoCapableWorker(FlowMeshError):
    """No worker class in the fleet can ever satisfy the corrected requirement."""


# --- worker runtime ---

class FootprintTooLarge(FlowMeshError):
    """Signature cannot fit in worker VRAM even with everything else evicted."""


class ResourceShortage(FlowMeshError):
    """Actual memory need exceeded worker VRAM at execution time."""


class InputUnavailable(FlowMeshError):
    """A batch input hash could not be resolved from cache or CAS."""


# --- simulation harness ---

class ConfigError(FlowMeshError):
    """Scenario configuration is invalid."""


class TruncatedLog(FlowMeshError):
    """Event log ends without a scenario_end record."""


class UnknownSelector(FlowMeshError):
    """Failure-injection selector does not parse or match."""
