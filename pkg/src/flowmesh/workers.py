"""Stateless simulated workers: signature loading, batched execution, power.

A worker is a single sequential execution lane. It owns no durable state:
everything it produces goes to the CAS, so killing one loses at most its
in-flight batch. Timing and power follow the configured PerfModel; energy is
integrated exactly over piecewise-constant power segments.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Any

from .cas import ArtifactKind, CASStore
from .defaults import SimLimits
from .errors import FootprintTooLarge, NotFound, WorkerGone
from .identity import ContentHash, ExecSignature, TaskIdentity
from .perf import PerfEntry, PerfModel
from .workflow import OperatorKind, ResourceClass

_OUTPUT_KIND: dict[OperatorKind, ArtifactKind] = {
    OperatorKind.INFERENCE: ArtifactKind.ROLLOUT,
    OperatorKind.EVAL: ArtifactKind.EVAL_TRACE,
    OperatorKind.DATA_PREP: ArtifactKind.DATASET_SHARD,
    OperatorKind.TOOL_CALL: ArtifactKind.GENERIC,
    OperatorKind.SFT: ArtifactKind.ADAPTER,
    OperatorKind.DPO: ArtifactKind.ADAPTER,
    OperatorKind.PPO: ArtifactKind.ADAPTER,
}


def synth_output(identity: TaskIdentity, nbytes: int) -> bytes:
    """Deterministic output bytes for a task identity, reproducible across runs."""
    seed = identity.digest.encode("ascii")
    out = bytearray()
    counter = 0
    while len(out) < nbytes:
        out += hashlib.sha256(seed + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:nbytes])


@dataclass(frozen=True)
class WorkerDescriptor:
    worker_id: str
    resource_class: ResourceClass
    vram_bytes: int
    arch_generation: int
    cost_rate: float  # $/hour
    idle_power_watts: float
    peak_power_watts: float
    provisioned_at: float
    tenant_visibility: str = "shared"  # or "private:<tenant_id>"


@dataclass(frozen=True)
class HeartbeatRecord:
    worker_id: str
    t: float
    power_watts: float
    queued_ops: int


@dataclass(frozen=True)
class BatchMember:
    workflow_id: str
    operator_id: str
    identity: TaskIdentity
    input_hashes: tuple[ContentHash, ...]
    effective_model_mem: int  # corrected / hinted / table footprint, bytes


@dataclass
class AdmittedBatch:
    batch_id: int
    signature: ExecSignature
    op_kind: OperatorKind
    model_ref: str
    resource_class: ResourceClass
    members: list[BatchMember]
    decided_at: float
    is_replica: bool = False


@dataclass
class StartInfo:
    """Timing plan for a batch the worker just began."""

    batch: AdmittedBatch
    started_at: float
    load_s: float
    fetch_s: float
    exec_s: float
    finish_t: float
    exec_power_watts: float
    evicted: list[str] = field(default_factory=list)
    misfit: bool = False
    observed_mem_bytes: int = 0
    missing_input: ContentHash | None = None

    @property
    def exec_start_t(self) -> float:
        return self.started_at + self.load_s + self.fetch_s


class LocalCache:
    """Worker-local residency: loaded signatures (VRAM) and artifact bytes (disk)."""

    def __init__(self, vram_bytes: int, artifact_budget_bytes: int):
        self.vram_bytes = vram_bytes
        self.artifact_budget = artifact_budget_bytes
        self.resident: OrderedDict[str, int] = OrderedDict()  # sig hex -> footprint
        self.aux_present: set[str] = set()  # tokenizer/adapter sticky on local disk
        self.artifacts: OrderedDict[str, int] = OrderedDict()  # hash hex -> size

    def resident_bytes(self) -> int:
        return sum(self.resident.values())

    def is_resident(self, sig: ExecSignature) -> bool:
        return sig.digest in self.resident

    def has_aux(self, sig: ExecSignature) -> bool:
        return sig.digest in self.aux_present

    def has_artifact(self, h: ContentHash) -> bool:
        return h.digest in self.artifacts

    def ensure_resident(self, sig: ExecSignature, footprint: int) -> tuple[bool, list[str]]:
        """Make the signature resident; returns (was_cold, evicted sig hexes)."""
        if sig.digest in self.resident:
            self.resident.move_to_end(sig.digest)
            return False, []
        if footprint > self.vram_bytes:
            raise FootprintTooLarge(
                f"footprint {footprint} exceeds VRAM {self.vram_bytes} even alone"
            )
        evicted = []
        while self.resident_bytes() + footprint > self.vram_bytes:
            victim, _ = self.resident.popitem(last=False)
            evicted.append(victim)
        self.resident[sig.digest] = footprint
        self.aux_present.add(sig.digest)
        return True, evicted

    def admit_artifact(self, h: ContentHash, size: int) -> None:
        self.artifacts[h.digest] = size
        self.artifacts.move_to_end(h.digest)
        while sum(self.artifacts.values()) > self.artifact_budget and len(self.artifacts) > 1:
            self.artifacts.popitem(last=False)

    def touch_artifact(self, h: ContentHash) -> None:
        if h.digest in self.artifacts:
            self.artifacts.move_to_end(h.digest)


@dataclass
class _Running:
    batch: AdmittedBatch
    epoch: int
    info: StartInfo


class Worker:
    """One simulated device: a sequential lane with caches and power accounting."""

    def __init__(
        self,
        descriptor: WorkerDescriptor,
        perf: PerfModel,
        cas: CASStore,
        limits: SimLimits,
    ):
        self.descriptor = descriptor
        self.perf = perf
        self.cas = cas
        self.limits = limits
        self.cache = LocalCache(descriptor.vram_bytes, limits.artifact_cache_bytes)
        self.queue: deque[AdmittedBatch] = deque()
        self.current: _Running | None = None
        self.alive = True
        self.crashed = False
        self.hung = False
        self.draining = False
        self.usable_at = descriptor.provisioned_at
        self.retired_at: float | None = None
        self.last_heartbeat = descriptor.provisioned_at
        self.idle_since = descriptor.provisioned_at
        self.epoch = 0
        self._energy_j = 0.0
        self._acct_t = descriptor.provisioned_at

    # --- identity & state ---

    @property
    def worker_id(self) -> str:
        return self.descriptor.worker_id

    def usable(self, now: float) -> bool:
        return self.alive and not self.draining and self.retired_at is None and now >= self.usable_at

    def outstanding_batches(self) -> int:
        return len(self.queue) + (1 if self.current is not None else 0)

    def queued_ops(self) -> int:
        n = sum(len(b.members) for b in self.queue)
        if self.current is not None:
            n += len(self.current.batch.members)
        return n

    # --- power and energy accounting ---

    def _exec_power(self, kind: OperatorKind, n: int) -> float:
        cap = self.limits.max_batch.get(kind, 1)
        util = min(1.0, n / cap)
        d = self.descriptor
        return d.idle_power_watts + (d.peak_power_watts - d.idle_power_watts) * util

    def power_at(self, now: float) -> float:
        if not self.alive or self.retired_at is not None:
            return 0.0
        if self.current is not None and not self.current.info.misfit:
            info = self.current.info
            if info.exec_start_t <= now < info.finish_t:
                return info.exec_power_watts
        return self.descriptor.idle_power_watts

    def advance_accounting(self, now: float) -> None:
        """Integrate power from the last accounting point up to `now`."""
        if now <= self._acct_t:
            return
        a, b = self._acct_t, now
        if self.current is not None and not self.current.info.misfit:
            info = self.current.info
            ex0, ex1 = info.exec_start_t, info.finish_t
            lo, hi = max(a, ex0), min(b, ex1)
            exec_span = max(0.0, hi - lo)
            idle_span = (b - a) - exec_span
            self._energy_j += exec_span * info.exec_power_watts
            self._energy_j += idle_span * self.descriptor.idle_power_watts
        else:
            self._energy_j += (b - a) * self.descriptor.idle_power_watts
        self._acct_t = now

    @property
    def energy_joules(self) -> float:
        return self._energy_j

    def cost_usd(self, now: float) -> float:
        end = self.retired_at if self.retired_at is not None else now
        return max(0.0, end - self.descriptor.provisioned_at) / 3600.0 * self.descriptor.cost_rate

    # --- admission and execution ---

    def admit(self, batch: AdmittedBatch) -> None:
        if not self.alive or self.draining or self.retired_at is not None:
            raise WorkerGone(self.worker_id)
        self.queue.append(batch)

    def maybe_start(self, now: float) -> StartInfo | None:
        """Begin the next queued batch if idle; returns its timing plan."""
        if self.current is not None or not self.queue or not self.alive or self.hung:
            return None
        self.advance_accounting(now)
        batch = self.queue.popleft()
        entry = self.perf.require(batch.op_kind, batch.model_ref, self.descriptor.resource_class)
        n = len(batch.members)

        actual_mem = entry.batch_mem(n)
        if actual_mem > self.descriptor.vram_bytes:
            # Under-specified placement: the load attempt surfaces the shortage.
            info = StartInfo(
                batch=batch, started_at=now, load_s=entry.load_time_s, fetch_s=0.0,
                exec_s=0.0, finish_t=now + entry.load_time_s, exec_power_watts=0.0,
                misfit=True, observed_mem_bytes=actual_mem,
            )
            self.current = _Running(batch=batch, epoch=self.epoch, info=info)
            return info

        cold, evicted = self.cache.ensure_resident(batch.signature, entry.mem_footprint_bytes)
        load_s = entry.load_time_s if cold else 0.0

        fetch_bytes = 0
        seen: set[str] = set()
        missing: ContentHash | None = None
        for member in batch.members:
            for h in member.input_hashes:
                if h.digest in seen:
                    continue
                seen.add(h.digest)
                if self.cache.has_artifact(h):
                    self.cache.touch_artifact(h)
                    continue
                try:
                    size = self.cas.size_of(h)
                except NotFound:
                    missing = h
                    break
                fetch_bytes += size
                self.cache.admit_artifact(h, size)
            if missing is not None:
                break
        if missing is not None:
            # Unresolvable input: report instantly, batch never runs.
            self.idle_since = now
            return StartInfo(
                batch=batch, started_at=now, load_s=0.0, fetch_s=0.0, exec_s=0.0,
                finish_t=now, exec_power_watts=0.0, missing_input=missing,
            )

        fetch_s = fetch_bytes / self.limits.bandwidth_bytes_per_s
        exec_s = entry.duration(n)
        info = StartInfo(
            batch=batch, started_at=now, load_s=load_s, fetch_s=fetch_s, exec_s=exec_s,
            finish_t=now + load_s + fetch_s + exec_s,
            exec_power_watts=self._exec_power(batch.op_kind, n),
            evicted=evicted,
        )
        self.current = _Running(batch=batch, epoch=self.epoch, info=info)
        return info

    def complete_current(self, now: float) -> list[tuple[BatchMember, ContentHash]]:
        """Finish the running batch: write one output per member to the CAS."""
        assert self.current is not None and not self.current.info.misfit
        self.advance_accounting(now)
        batch = self.current.batch
        entry = self.perf.require(batch.op_kind, batch.model_ref, self.descriptor.resource_class)
        results = []
        for member in batch.members:
            data = synth_output(member.identity, entry.output_bytes)
            h = self.cas.put(data, kind=_OUTPUT_KIND[batch.op_kind])
            self.cache.admit_artifact(h, len(data))
            results.append((member, h))
        self.current = None
        self.idle_since = now
        return results

    def abort_misfit(self, now: float) -> AdmittedBatch:
        assert self.current is not None and self.current.info.misfit
        self.advance_accounting(now)
        batch = self.current.batch
        self.current = None
        self.idle_since = now
        return batch

    def heartbeat(self, now: float) -> HeartbeatRecord:
        self.advance_accounting(now)
        self.last_heartbeat = now
        return HeartbeatRecord(
            worker_id=self.worker_id, t=now,
            power_watts=self.power_at(now), queued_ops=self.queued_ops(),
        )

    # --- lifecycle ---

    def drain(self) -> None:
        self.draining = True

    def retire(self, now: float) -> None:
        self.advance_accounting(now)
        self.alive = False
        self.retired_at = now

    def crash(self, now: float) -> None:
        """Hard failure: drops in-flight work, stops heartbeats and power draw.

        The watchdog measures silence from the moment of the crash, so the
        last-heartbeat stamp is pinned here.
        """
        self.advance_accounting(now)
        self.alive = False
        self.crashed = True
        self.retired_at = now
        self.last_heartbeat = now
        self.epoch += 1

    def hang(self, now: float) -> None:
        """Silent failure: keeps heartbeating but never completes anything."""
        self.hung = True
        self.epoch += 1

    def snapshot(self) -> dict[str, Any]:
        return {
            "worker_id": self.worker_id,
            "class": self.descriptor.resource_class.value,
            "alive": self.alive,
            "queued": self.queued_ops(),
            "resident": sorted(self.cache.resident),
        }
