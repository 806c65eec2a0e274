"""Content-addressable store with lineage and first-writer-wins publication.

On-disk layout under one root directory:

    objects/<aa>/<bb>/<full hex>   one file per artifact, sharded by the
                                   first two hex bytes of the digest
    index.log                      append-only identity -> output bindings
    meta.log                       append-only {hash, size, kind} records
    lineage.log                    newline-delimited lineage edges and
                                   discard notes, in completion order

Every index mutation is appended to its log before the in-memory view is
updated, so a restarted store rebuilds exactly by replay. Artifacts are
provenance: there is no eviction, only a hard StorageFull refusal.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from .errors import (
    IntegrityError,
    MissingArtifact,
    NotFound,
    StorageFull,
    UnknownWorkflow,
)
from .identity import ContentHash, TaskIdentity, content_hash

CACHE_EXECUTOR = "cache"


class ArtifactKind(str, Enum):
    MODEL_WEIGHTS = "model_weights"
    ADAPTER = "adapter"
    TOKENIZER = "tokenizer"
    DATASET_SHARD = "dataset_shard"
    ROLLOUT = "rollout"
    SCORE = "score"
    EVAL_TRACE = "eval_trace"
    GENERIC = "generic"

    def __str__(self) -> str:
        return self.value


class PublishOutcome(str, Enum):
    WON = "won"
    DUPLICATE_DISCARDED = "duplicate_discarded"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Artifact:
    hash: ContentHash
    data: bytes
    size: int
    kind: ArtifactKind


@dataclass(frozen=True)
class LineageEdge:
    """Exact versions consumed and produced by one completed operator."""

    workflow_id: str
    operator_id: str
    task_identity: TaskIdentity
    consumed: tuple[ContentHash, ...]
    produced: ContentHash
    executed_by: str  # worker id, or "cache" when fanned out without execution
    completed_at: float

    def to_record(self) -> dict[str, Any]:
        return {
            "workflow_id": self.workflow_id,
            "operator_id": self.operator_id,
            "task_identity": self.task_identity.digest,
            "consumed": [h.digest for h in self.consumed],
            "produced": self.produced.digest,
            "executed_by": self.executed_by,
            "completed_at": self.completed_at,
        }

    @staticmethod
    def from_record(rec: dict[str, Any]) -> "LineageEdge":
        return LineageEdge(
            workflow_id=rec["workflow_id"],
            operator_id=rec["operator_id"],
            task_identity=TaskIdentity(rec["task_identity"]),
            consumed=tuple(ContentHash(h) for h in rec["consumed"]),
            produced=ContentHash(rec["produced"]),
            executed_by=rec["executed_by"],
            completed_at=float(rec["completed_at"]),
        )


class CASStore:
    """Filesystem-backed CAS; linearizable for a single store instance."""

    def __init__(self, root: str | Path, capacity_bytes: int | None = None):
        self.root = Path(root)
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._objects = self.root / "objects"
        self._index_log = self.root / "index.log"
        self._meta_log = self.root / "meta.log"
        self._lineage_log = self.root / "lineage.log"
        self._objects.mkdir(parents=True, exist_ok=True)
        self._sizes: dict[str, int] = {}
        self._kinds: dict[str, ArtifactKind] = {}
        self._index: dict[str, str] = {}  # identity hex -> output hex, first writer
        self._edges: list[LineageEdge] = []
        self._replay_logs()

    def _replay_logs(self) -> None:
        if self._meta_log.exists():
            for line in self._meta_log.read_text("utf-8").splitlines():
                rec = json.loads(line)
                self._sizes[rec["hash"]] = int(rec["size"])
                self._kinds[rec["hash"]] = ArtifactKind(rec["kind"])
        if self._index_log.exists():
            for line in self._index_log.read_text("utf-8").splitlines():
                rec = json.loads(line)
                self._index.setdefault(rec["identity"], rec["output"])
        if self._lineage_log.exists():
            for line in self._lineage_log.read_text("utf-8").splitlines():
                rec = json.loads(line)
                if rec.get("kind") == "edge":
                    self._edges.append(LineageEdge.from_record(rec["edge"]))

    def _object_path(self, digest: str) -> Path:
        return self._objects / digest[:2] / digest[2:4] / digest

    def _append(self, log: Path, record: dict[str, Any]) -> None:
        with log.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    # --- artifacts ---

    @property
    def used_bytes(self) -> int:
        return sum(self._sizes.values())

    def put(self, data: bytes, kind: ArtifactKind = ArtifactKind.GENERIC) -> ContentHash:
        """Store bytes under their hash. Idempotent: equal bytes, one copy."""
        h = content_hash(data)
        with self._lock:
            if h.digest in self._sizes:
                return h
            if self.capacity_bytes is not None and self.used_bytes + len(data) > self.capacity_bytes:
                raise StorageFull(
                    f"putting {len(data)} bytes would exceed capacity {self.capacity_bytes}"
                )
            path = self._object_path(h.digest)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.rename(path)
            self._append(self._meta_log, {"hash": h.digest, "size": len(data), "kind": kind.value})
            self._sizes[h.digest] = len(data)
            self._kinds[h.digest] = kind
        return h

    def get(self, h: ContentHash) -> Artifact:
        """Fetch and re-verify an artifact; IntegrityError on corruption."""
        path = self._object_path(h.digest)
        if h.digest not in self._sizes or not path.exists():
            raise NotFound(h.digest)
        data = path.read_bytes()
        if content_hash(data) != h:
            raise IntegrityError(f"stored bytes for {h.digest[:12]}... fail re-hash")
        return Artifact(hash=h, data=data, size=len(data),
                        kind=self._kinds.get(h.digest, ArtifactKind.GENERIC))

    def has(self, h: ContentHash) -> bool:
        return h.digest in self._sizes and self._object_path(h.digest).exists()

    def size_of(self, h: ContentHash) -> int:
        if h.digest not in self._sizes:
            raise NotFound(h.digest)
        return self._sizes[h.digest]

    # --- identity index and lineage ---

    def lookup_output(self, identity: TaskIdentity) -> ContentHash | None:
        """Published output for this identity, if any execution ever won."""
        hex_out = self._index.get(identity.digest)
        return ContentHash(hex_out) if hex_out is not None else None

    def publish(
        self, identity: TaskIdentity, output: ContentHash, edge: LineageEdge
    ) -> PublishOutcome:
        """Atomically bind identity -> output, first writer wins.

        The winner's lineage edge is appended; losers leave only a discard
        note. The output must already be stored.
        """
        if not self.has(output):
            raise MissingArtifact(output.digest)
        with self._lock:
            if identity.digest in self._index:
                self._append(
                    self._lineage_log,
                    {"kind": "discard", "identity": identity.digest,
                     "output": output.digest, "executed_by": edge.executed_by,
                     "completed_at": edge.completed_at},
                )
                return PublishOutcome.DUPLICATE_DISCARDED
            self._append(self._index_log, {"identity": identity.digest, "output": output.digest})
            self._index[identity.digest] = output.digest
            self._append(self._lineage_log, {"kind": "edge", "edge": edge.to_record()})
            self._edges.append(edge)
        return PublishOutcome.WON

    def record_lineage(self, edge: LineageEdge) -> None:
        """Append a fan-out or cache-completion edge (no index mutation)."""
        with self._lock:
            self._append(self._lineage_log, {"kind": "edge", "edge": edge.to_record()})
            self._edges.append(edge)

    def replay(self, workflow_id: str) -> list[LineageEdge]:
        """All lineage edges of one workflow, in completion order."""
        edges = [e for e in self._edges if e.workflow_id == workflow_id]
        if not edges:
            raise UnknownWorkflow(workflow_id)
        return edges

    def lineage_edges(self) -> Iterable[LineageEdge]:
        return tuple(self._edges)
