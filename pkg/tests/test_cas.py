"""Content-addressable store: idempotence, integrity, publication, lineage."""

import threading

import pytest

from flowmesh.cas import ArtifactKind, CASStore, LineageEdge, PublishOutcome
from flowmesh.errors import (
    IntegrityError,
    MissingArtifact,
    NotFound,
    StorageFull,
    UnknownWorkflow,
)
from flowmesh.identity import ContentHash, TaskIdentity, content_hash

# SHA-256 of b"", fixed independently of the implementation.
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


@pytest.fixture
def store(tmp_path):
    return CASStore(tmp_path / "cas")


def edge_for(identity: TaskIdentity, produced: ContentHash, wf="wf-1", op="n00",
             by="w-000", at=1.0) -> LineageEdge:
    return LineageEdge(
        workflow_id=wf, operator_id=op, task_identity=identity,
        consumed=(), produced=produced, executed_by=by, completed_at=at,
    )


class TestPut:
    def test_idempotent(self, store):
        h1 = store.put(b"payload")
        used = store.used_bytes
        h2 = store.put(b"payload")
        assert h1 == h2
        assert store.used_bytes == used  # one copy

    def test_empty_bytes_digest(self, store):
        assert store.put(b"").digest == EMPTY_SHA256

    def test_distinct_content_distinct_hashes(self, store):
        assert store.put(b"one") != store.put(b"two")

    def test_storage_full(self, tmp_path):
        small = CASStore(tmp_path / "cas", capacity_bytes=10)
        small.put(b"12345")
        with pytest.raises(StorageFull):
            small.put(b"123456789")  # would exceed 10 bytes total
        # idempotent re-put of existing content is still fine
        assert small.put(b"12345")


class TestGet:
    def test_roundtrip(self, store):
        h = store.put(b"roundtrip", kind=ArtifactKind.ROLLOUT)
        art = store.get(h)
        assert art.data == b"roundtrip"
        assert art.size == 9
        assert art.kind is ArtifactKind.ROLLOUT

    def test_not_found(self, store):
        with pytest.raises(NotFound):
            store.get(content_hash(b"never stored"))

    def test_corruption_detected(self, store, tmp_path):
        h = store.put(b"precious bytes")
        path = store._object_path(h.digest)
        path.write_bytes(b"tampered bytes")
        with pytest.raises(IntegrityError):
            store.get(h)


class TestHas:
    def test_has_after_put(self, store):
        assert store.has(store.put(b"x"))

    def test_has_random_digest_false(self, store):
        assert not store.has(content_hash(b"some other content"))

    def test_survives_restart(self, tmp_path):
        root = tmp_path / "cas"
        first = CASStore(root)
        hashes = [first.put(f"artifact-{i}".encode()) for i in range(10)]
        identity = TaskIdentity("ab" * 32)
        first.publish(identity, hashes[0], edge_for(identity, hashes[0]))

        reopened = CASStore(root)
        for h in hashes:
            assert reopened.has(h)
            assert reopened.get(h).data.startswith(b"artifact-")
        assert reopened.lookup_output(identity) == hashes[0]
        assert len(reopened.replay("wf-1")) == 1


class TestPublish:
    def test_first_publish_wins(self, store):
        identity = TaskIdentity("11" * 32)
        out = store.put(b"result")
        assert store.publish(identity, out, edge_for(identity, out)) is PublishOutcome.WON

    def test_duplicate_discarded_keeps_first_binding(self, store):
        identity = TaskIdentity("22" * 32)
        first = store.put(b"first result")
        second = store.put(b"second result")
        assert store.publish(identity, first, edge_for(identity, first)) is PublishOutcome.WON
        outcome = store.publish(identity, second, edge_for(identity, second, by="w-001"))
        assert outcome is PublishOutcome.DUPLICATE_DISCARDED
        assert store.lookup_output(identity) == first

    def test_missing_artifact(self, store):
        identity = TaskIdentity("33" * 32)
        ghost = content_hash(b"not stored")
        with pytest.raises(MissingArtifact):
            store.publish(identity, ghost, edge_for(identity, ghost))

    def test_lookup_before_any_execution(self, store):
        assert store.lookup_output(TaskIdentity("44" * 32)) is None

    def test_concurrent_publishes_single_winner(self, store):
        # N racing replicas -> exactly one won across all attempts
        identity = TaskIdentity("55" * 32)
        outs = [store.put(f"result-{i}".encode()) for i in range(10)]
        outcomes: list[PublishOutcome] = []
        lock = threading.Lock()

        def worker(i):
            result = store.publish(identity, outs[i], edge_for(identity, outs[i], by=f"w-{i}"))
            with lock:
                outcomes.append(result)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sum(1 for o in outcomes if o is PublishOutcome.WON) == 1
        # the winner's hash is whatever the index recorded first
        assert store.lookup_output(identity) in outs

    def test_loser_leaves_only_discard_note(self, store):
        identity = TaskIdentity("66" * 32)
        first = store.put(b"a")
        second = store.put(b"b")
        store.publish(identity, first, edge_for(identity, first))
        edges_before = len(store.replay("wf-1"))
        store.publish(identity, second, edge_for(identity, second, by="w-009"))
        assert len(store.replay("wf-1")) == edges_before  # no new edge


class TestReplay:
    def test_three_node_chain_in_order(self, store):
        ids = [TaskIdentity(f"{i:02d}" * 32) for i in range(3)]
        for i, identity in enumerate(ids):
            out = store.put(f"step-{i}".encode())
            store.publish(identity, out, edge_for(identity, out, op=f"n{i:02d}", at=float(i)))
        edges = store.replay("wf-1")
        assert [e.operator_id for e in edges] == ["n00", "n01", "n02"]
        assert [e.completed_at for e in edges] == [0.0, 1.0, 2.0]

    def test_cache_fanout_edge(self, store):
        identity = TaskIdentity("aa" * 32)
        out = store.put(b"shared result")
        store.publish(identity, out, edge_for(identity, out, wf="wf-a"))
        store.record_lineage(edge_for(identity, out, wf="wf-b", by="cache", at=2.0))
        edges = store.replay("wf-b")
        assert len(edges) == 1
        assert edges[0].executed_by == "cache"

    def test_unknown_workflow(self, store):
        with pytest.raises(UnknownWorkflow):
            store.replay("wf-ghost")

    def test_consumed_hashes_resolvable(self, store):
        # lineage closure: every consumed hash resolves at replay time
        a = store.put(b"upstream")
        identity = TaskIdentity("bb" * 32)
        out = store.put(b"downstream")
        edge = LineageEdge(
            workflow_id="wf-1", operator_id="n01", task_identity=identity,
            consumed=(a,), produced=out, executed_by="w-000", completed_at=3.0,
        )
        store.publish(identity, out, edge)
        for e in store.replay("wf-1"):
            for h in e.consumed:
                assert store.get(h).data == b"upstream"


class TestImmutability:
    def test_all_gets_identical(self, store):
        h = store.put(b"stable")
        reads = {store.get(h).data for _ in range(5)}
        assert reads == {b"stable"}

    def test_put_k_times_counts_once(self, store):
        for _ in range(7):
            store.put(b"same bytes")
        assert store.used_bytes == len(b"same bytes")
