"""Default fleet, performance tables and tunables for desk-scale runs.

Numbers here are a configured performance/cost/power model, not measurements:
they shape scenario dynamics but acceptance rests on exact properties, not on
these constants. Everything is overridable from the scenario config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .workflow import OperatorKind, ResourceClass

GiB = 2**30
KiB = 1024


@dataclass(frozen=True)
class WorkerTemplate:
    resource_class: ResourceClass
    vram_bytes: int
    arch_generation: int
    cost_rate: float  # $/hour while provisioned
    idle_power_watts: float
    peak_power_watts: float


# Heterogeneous classes, roughly Vast.ai-style rental economics.
WORKER_TEMPLATES: dict[ResourceClass, WorkerTemplate] = {
    ResourceClass.H100_94G: WorkerTemplate(
        ResourceClass.H100_94G, 94 * GiB, 9, cost_rate=2.20,
        idle_power_watts=75.0, peak_power_watts=400.0),
    ResourceClass.RTX4090_48G: WorkerTemplate(
        ResourceClass.RTX4090_48G, 48 * GiB, 8, cost_rate=0.55,
        idle_power_watts=30.0, peak_power_watts=450.0),
    ResourceClass.RTX4090_24G: WorkerTemplate(
        ResourceClass.RTX4090_24G, 24 * GiB, 8, cost_rate=0.35,
        idle_power_watts=25.0, peak_power_watts=450.0),
}

# Default fleet: the three classes in equal proportion.
DEFAULT_FLEET: list[tuple[ResourceClass, int]] = [
    (ResourceClass.H100_94G, 2),
    (ResourceClass.RTX4090_48G, 2),
    (ResourceClass.RTX4090_24G, 2),
]

DEFAULT_MODELS = ["llama-3.1-8b@v1", "llama-3.2-3b@v1", "llama-3.2-1b@v1"]
UTILITY_MODELS = ["prep@v0", "tools@v0"]  # data_prep / tool_call executors

# Per-kind batch caps (continuous-batching slice sizes).
MAX_BATCH: dict[OperatorKind, int] = {
    OperatorKind.INFERENCE: 24,
    OperatorKind.EVAL: 24,
    OperatorKind.TOOL_CALL: 24,
    OperatorKind.DATA_PREP: 16,
    OperatorKind.SFT: 12,
    OperatorKind.DPO: 12,
    OperatorKind.PPO: 12,
}


@dataclass
class SimLimits:
    """Control-plane and data-plane tunables, one knob per mechanism."""

    max_batch: dict[OperatorKind, int] = field(default_factory=lambda: dict(MAX_BATCH))
    max_outstanding_batches: int = 2     # per worker: running + queued admissions
    watchdog_s: float = 30.0
    tick_s: float = 1.0
    heartbeat_s: float = 5.0
    warmup_s: float = 45.0               # provision -> usable lag
    idle_timeout_s: float = 60.0
    fleet_floor: int = 1
    fleet_max: int = 12
    scale_up_ratio: float = 2.0          # pending / capacity, sustained one tick
    speculation_factor: float = 2.0
    speculation_min_samples: int = 20
    bandwidth_bytes_per_s: float = 1e9   # CAS fetch path
    misfit_margin_frac: float = 0.10
    artifact_cache_bytes: int = 4 * GiB
    check_invariants: bool = True


# (base_latency_s, per_item_latency_s, alpha, per_item_mem, output_bytes) on
# the fastest class for an 8B-scale model; scaled by model size and class
# speed below. Training steps are long and batch almost linearly.
_KIND_SHAPE: dict[OperatorKind, tuple[float, float, float, float, int]] = {
    OperatorKind.INFERENCE: (2.0, 1.5, 0.55, 0.30 * GiB, 8 * KiB),
    OperatorKind.EVAL: (2.0, 1.2, 0.60, 0.20 * GiB, 4 * KiB),
    OperatorKind.TOOL_CALL: (0.5, 0.4, 0.70, 0.05 * GiB, 2 * KiB),
    OperatorKind.DATA_PREP: (1.0, 0.8, 0.70, 0.10 * GiB, 64 * KiB),
    OperatorKind.SFT: (40.0, 12.0, 0.85, 0.50 * GiB, 256 * KiB),
    OperatorKind.DPO: (35.0, 10.0, 0.85, 0.50 * GiB, 256 * KiB),
    OperatorKind.PPO: (60.0, 15.0, 0.85, 0.60 * GiB, 256 * KiB),
}

# Inference-time weight footprints by model; training multiplies these.
_MODEL_SIZE: dict[str, tuple[float, float]] = {
    # ref -> (speed/memory scale factor, inference footprint GiB)
    "llama-3.1-8b@v1": (1.00, 18.0),
    "llama-3.2-3b@v1": (0.50, 8.0),
    "llama-3.2-1b@v1": (0.25, 3.5),
    "prep@v0": (0.10, 1.0),
    "tools@v0": (0.10, 1.0),
}

_TRAIN_MEM_FACTOR = {OperatorKind.SFT: 3.0, OperatorKind.DPO: 3.2, OperatorKind.PPO: 3.6}

# Relative execution speed and weight-load bandwidth per class.
_CLASS_SPEED: dict[ResourceClass, tuple[float, float]] = {
    ResourceClass.H100_94G: (1.00, 2.0),   # (speed, load GiB/s)
    ResourceClass.RTX4090_48G: (0.45, 1.5),
    ResourceClass.RTX4090_24G: (0.42, 1.5),
}


def default_perf_entries() -> list[dict]:
    """Full (op_kind, model, class) table as plain records, config-mergeable."""
    rows = []
    for kind, (base, per_item, alpha, item_mem, out_bytes) in _KIND_SHAPE.items():
        if kind in (OperatorKind.DATA_PREP, OperatorKind.TOOL_CALL):
            models = UTILITY_MODELS
        else:
            models = DEFAULT_MODELS
        for ref in models:
            scale, foot_gib = _MODEL_SIZE[ref]
            mem = foot_gib * _TRAIN_MEM_FACTOR.get(kind, 1.0)
            for rclass, (speed, load_bw) in _CLASS_SPEED.items():
                rows.append({
                    "op_kind": kind.value,
                    "model_ref": ref,
                    "resource_class": rclass.value,
                    "base_latency_s": round(base * scale / speed, 6),
                    "per_item_latency_s": round(per_item * scale / speed, 6),
                    "alpha": alpha,
                    "load_time_s": round(mem / load_bw, 6),
                    "mem_footprint_bytes": int(mem * GiB),
                    "per_item_mem_bytes": int(item_mem),
                    "output_bytes": out_bytes,
                })
    return rows
