"""Control plane semantics: dedup, feasibility, utility, recovery, scaling."""

import pytest

from flowmesh.cas import CACHE_EXECUTOR
from flowmesh.control import (
    Ablation,
    MisfitReport,
    OpState,
    UtilityWeights,
)
from flowmesh.defaults import GiB, SimLimits, WORKER_TEMPLATES
from flowmesh.errors import (
    DuplicateWorkflowId,
    InfeasiblePair,
    NoCapableWorker,
    UnknownWorker,
    WorkerGone,
)
from flowmesh.workers import synth_output
from flowmesh.workflow import ResourceClass

from helpers import (
    MODEL,
    PlaneBuilder,
    inference_node,
    perf_records,
    pump,
    simple_perf,
    submit_doc,
    workflow_doc,
)


def shared_prefix_doc(wf_id, ext_hash, extra_params=None, tenant="tenant-0"):
    """One shared first stage feeding one per-workflow second stage."""
    nodes = {
        "n00": inference_node(ext_hash, params={"stage": "prefix"}),
        "n01": inference_node(None, params={"stage": "tail", "wf": wf_id},
                              upstream=["n00"]),
    }
    return workflow_doc(wf_id, nodes, tenant=tenant)


class TestSubmit:
    def test_single_node_enters_pool(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"data")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        assert b.plane.ready_count() == 1

    def test_identical_nodes_collapse_to_one_group(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"data")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        submit_doc(b.plane, workflow_doc("wf-2", {"n00": inference_node(ext)}))
        assert b.plane.ready_count() == 1  # one pooled group
        (group,) = [g for g in b.plane.groups.values()]
        assert len(group.consumers) == 2

    def test_duplicate_workflow_id(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        ext = b.external(b"data")
        doc = workflow_doc("wf-1", {"n00": inference_node(ext)})
        submit_doc(b.plane, doc)
        with pytest.raises(DuplicateWorkflowId):
            submit_doc(b.plane, doc)


class TestDeduplicate:
    def test_ten_workflows_one_execution(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"shared-data")
        for i in range(10):
            submit_doc(b.plane, shared_prefix_doc(f"wf-{i:02d}", ext))
        groups = [g for g in b.plane.groups.values() if len(g.consumers) == 10]
        assert len(groups) == 1
        pump(b.plane)
        assert b.plane.all_done()
        publishes = b.plane.events.of_kind("publish")
        prefix_id = groups[0].identity.digest
        assert sum(1 for p in publishes if p["identity"] == prefix_id) == 1
        edges = [e for e in b.plane.cas.lineage_edges()
                 if e.task_identity.digest == prefix_id]
        assert len(edges) == 10  # 1 executed + 9 cache
        assert sum(1 for e in edges if e.executed_by == CACHE_EXECUTOR) == 9

    def test_output_already_in_cas_skips_execution(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"shared-data")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        pump(b.plane)
        execs_before = len(b.plane.events.of_kind("publish"))
        # identical operator in a fresh workflow: completed from cache at submit
        submit_doc(b.plane, workflow_doc("wf-2", {"n00": inference_node(ext)}), now=50.0)
        rec = b.plane.workflows["wf-2"]
        assert rec.completed_at == 50.0
        assert len(b.plane.events.of_kind("publish")) == execs_before

    def test_distinct_identities_distinct_groups(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        for i in range(5):
            ext = b.external(f"data-{i}".encode())
            submit_doc(b.plane, workflow_doc(f"wf-{i}", {"n00": inference_node(ext)}))
        assert b.plane.ready_count() == 5

    def test_consolidation_off_never_groups(self, tmp_path):
        b = PlaneBuilder(tmp_path, ablation=Ablation(consolidation=False))
        b.add_worker()
        ext = b.external(b"shared")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        submit_doc(b.plane, workflow_doc("wf-2", {"n00": inference_node(ext)}))
        assert b.plane.ready_count() == 2


class TestFeasibility:
    def test_vram_bound(self, tmp_path):
        # 30 GiB need on a 24 GiB class worker -> infeasible
        b = PlaneBuilder(tmp_path, perf=simple_perf(footprint_gib=30, per_item_mem_gib=0))
        small = b.add_worker("w-000", rclass=ResourceClass.RTX4090_24G)
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext, rclass="class_4090_24g")}))
        (group,) = b.plane.groups.values()
        assert not b.plane.feasible(small, [group])

    def test_private_tenant_rejects_shared_worker(self, tmp_path):
        b = PlaneBuilder(tmp_path, tenant_rules={"tenant-9": "private_only"})
        shared = b.add_worker("w-000")
        private = b.add_worker("w-001", visibility="private:tenant-9")
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)},
                                         tenant="tenant-9"))
        (group,) = b.plane.groups.values()
        assert not b.plane.feasible(shared, [group])
        assert b.plane.feasible(private, [group])

    def test_headroom_and_class_ok(self, tmp_path):
        b = PlaneBuilder(tmp_path, perf=simple_perf(footprint_gib=30, per_item_mem_gib=1))
        big = b.add_worker("w-000", rclass=ResourceClass.RTX4090_48G)
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        (group,) = b.plane.groups.values()
        assert b.plane.feasible(big, [group])

    def test_conflicting_affinity_splits_group(self, tmp_path):
        b = PlaneBuilder(tmp_path, tenant_rules={"tenant-9": "private_only"})
        b.add_worker("w-000")
        b.add_worker("w-001", visibility="private:tenant-9")
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)},
                                         tenant="tenant-0"))
        submit_doc(b.plane, workflow_doc("wf-2", {"n00": inference_node(ext)},
                                         tenant="tenant-9"))
        # same identity, incompatible placement constraints -> two groups
        assert len(b.plane.groups) == 2
        pump(b.plane)
        assert b.plane.all_done()


class TestUtility:
    def test_throughput_only_weights_rank_by_throughput(self, tmp_path):
        b = PlaneBuilder(tmp_path, weights=UtilityWeights(1.0, 0.0, 0.0))
        fast = b.add_worker("w-000", rclass=ResourceClass.H100_94G, cost_rate=9.0)
        slow = b.add_worker("w-001", rclass=ResourceClass.RTX4090_24G, cost_rate=0.1)
        perf = perf_records()
        # make the h100 entry faster
        rows = []
        for rec in perf:
            rec = dict(rec)
            if rec["resource_class"] == "class_h100_94g":
                rec["base_latency_s"] = 1.0
                rec["per_item_latency_s"] = 0.5
            rows.append(rec)
        from flowmesh.perf import PerfModel

        b.plane.perf = PerfModel.from_records(rows)
        fast.perf = b.plane.perf
        slow.perf = b.plane.perf
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext, rclass="class_4090_24g")}))
        (group,) = b.plane.groups.values()
        u_fast = b.plane.estimate_utility(fast, [group])
        u_slow = b.plane.estimate_utility(slow, [group])
        assert u_fast > u_slow  # cost ignored, throughput decides

    def test_cold_worker_gets_zero_locality(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        cold = b.add_worker("w-000")
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        (group,) = b.plane.groups.values()
        assert b.plane.locality_gain(cold, [group]) == 0.0

    def test_locality_components(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker("w-000")
        ext_hex = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext_hex)}))
        (group,) = b.plane.groups.values()
        entry = b.plane.perf.require(group.op_kind, group.model_ref,
                                     worker.descriptor.resource_class)
        worker.cache.ensure_resident(group.signature, entry.mem_footprint_bytes)
        from flowmesh.identity import ContentHash

        worker.cache.admit_artifact(ContentHash(ext_hex), 1)
        assert b.plane.locality_gain(worker, [group]) == pytest.approx(0.6 + 0.3 + 0.1)

    def test_infeasible_pair_raises(self, tmp_path):
        b = PlaneBuilder(tmp_path, perf=simple_perf(footprint_gib=30, per_item_mem_gib=0))
        small = b.add_worker("w-000", rclass=ResourceClass.RTX4090_24G)
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext, rclass="class_4090_24g")}))
        (group,) = b.plane.groups.values()
        with pytest.raises(InfeasiblePair):
            b.plane.estimate_utility(small, [group])

    def test_argmax_matches_bruteforce_small_instance(self, tmp_path):
        # 3 workers x 2 candidate batches: exhaustive scoring agrees
        b = PlaneBuilder(tmp_path)
        workers = [
            b.add_worker("w-000", rclass=ResourceClass.H100_94G, cost_rate=2.0),
            b.add_worker("w-001", rclass=ResourceClass.RTX4090_48G, cost_rate=0.5),
            b.add_worker("w-002", rclass=ResourceClass.RTX4090_24G, cost_rate=0.3),
        ]
        ext = b.external(b"d")
        for i in range(2):
            submit_doc(b.plane, workflow_doc(
                f"wf-{i}", {"n00": inference_node(ext, params={"v": i},
                                                  rclass="class_4090_24g")}))
        groups = sorted(b.plane.groups.values(), key=lambda g: g.fcfs_key)
        batches = [[g] for g in groups]
        best = None
        for w in workers:
            for batch in batches:
                if not b.plane.feasible(w, batch):
                    continue
                u = b.plane.estimate_utility(w, batch)
                key = (-u, w.worker_id, batch[0].fcfs_key, -len(batch))
                if best is None or key < best[0]:
                    best = (key, w.worker_id, batch[0].key)
        decisions = b.plane.schedule_step(0.0)
        assert decisions[0].worker_id == best[1]
        assert decisions[0].group_keys[0] == best[2]


class TestScheduleStep:
    def test_one_worker_one_op(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        decisions = b.plane.schedule_step(0.0)
        assert len(decisions) == 1
        assert len(decisions[0].group_keys) == 1

    def test_full_batch_of_24(self, tmp_path):
        b = PlaneBuilder(tmp_path, perf=simple_perf(per_item_mem_gib=0))
        b.add_worker()
        for i in range(24):
            ext = b.external(f"prompt-{i}".encode())
            submit_doc(b.plane, workflow_doc(f"wf-{i:02d}", {"n00": inference_node(ext)}))
        decisions = b.plane.schedule_step(0.0)
        assert len(decisions[0].group_keys) == 24

    def test_fcfs_never_inverted_within_signature(self, tmp_path):
        b = PlaneBuilder(tmp_path, perf=simple_perf(per_item_mem_gib=0))
        b.add_worker()
        submit_order = []
        for i in range(10):
            ext = b.external(f"p-{i}".encode())
            wf = f"wf-{i:02d}"
            submit_doc(b.plane, workflow_doc(wf, {"n00": inference_node(ext)}), now=float(i))
            submit_order.append(wf)
        decisions = b.plane.schedule_step(20.0)
        scheduled = [
            self_key[0]
            for d in decisions
            for self_key in (b.plane.groups[k].representative for k in d.group_keys)
        ]
        assert scheduled == sorted(scheduled, key=submit_order.index)

    def test_weight_scaling_leaves_decisions_unchanged(self, tmp_path):
        for c in (2.0, 0.5, 16.0, 3.0):
            seqs = []
            for weights in (UtilityWeights(1.0, 1.0, 0.5),
                            UtilityWeights(1.0 * c, 1.0 * c, 0.5 * c)):
                b = PlaneBuilder(tmp_path / f"{c}-{weights.w_t}", weights=weights)
                b.add_worker("w-000", rclass=ResourceClass.H100_94G, cost_rate=2.0)
                b.add_worker("w-001", rclass=ResourceClass.RTX4090_24G, cost_rate=0.3)
                for i in range(6):
                    ext = b.external(f"p-{i}".encode())
                    submit_doc(b.plane, workflow_doc(
                        f"wf-{i}", {"n00": inference_node(ext, rclass="class_4090_24g")}))
                decisions = b.plane.schedule_step(0.0)
                seqs.append([(d.worker_id, tuple(d.group_keys)) for d in decisions])
            assert seqs[0] == seqs[1]


class TestAdmission:
    def test_admit_appends_to_queue(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker()
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        (decision,) = b.plane.schedule_step(0.0)
        b.plane.admit(decision, 0.0)
        assert worker.outstanding_batches() == 1

    def test_admit_to_dead_worker_rolls_back(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker()
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        (decision,) = b.plane.schedule_step(0.0)
        worker.crash(0.0)
        with pytest.raises(WorkerGone):
            b.plane.admit(decision, 0.0)
        inst = b.plane.instances[("wf-1", "n00")]
        assert inst.state is OpState.READY
        assert b.plane.ready_count() == 1

    def test_outstanding_cap_limits_admissions(self, tmp_path):
        limits = SimLimits(max_outstanding_batches=2)
        b = PlaneBuilder(tmp_path, limits=limits, perf=simple_perf(per_item_mem_gib=0))
        b.add_worker()
        for i in range(80):
            ext = b.external(f"p-{i}".encode())
            submit_doc(b.plane, workflow_doc(f"wf-{i:02d}", {"n00": inference_node(ext)}))
        decisions = b.plane.schedule_step(0.0)
        assert len(decisions) == 2  # cap, not the whole backlog
        assert b.plane.ready_count() == 80 - sum(len(d.group_keys) for d in decisions)


class TestCompletionFanout:
    def test_three_consumers_three_edges_one_publish(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"shared")
        for i in range(3):
            submit_doc(b.plane, workflow_doc(f"wf-{i}", {"n00": inference_node(ext)}))
        pump(b.plane)
        assert len(b.plane.events.of_kind("publish")) == 1
        assert len(list(b.plane.cas.lineage_edges())) == 3

    def test_diamond_join_waits_for_both_branches(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        b.add_worker()
        ext = b.external(b"src")
        nodes = {
            "n00": inference_node(ext),
            "n01": inference_node(None, params={"side": "l"}, upstream=["n00"]),
            "n02": inference_node(None, params={"side": "r"}, upstream=["n00"]),
            "n03": inference_node(None, params={"join": 1}, upstream=["n01", "n02"]),
        }
        submit_doc(b.plane, workflow_doc("wf-1", nodes))
        plane = b.plane
        pump(plane)
        assert plane.workflows["wf-1"].completed_at is not None
        # reconstruct readiness order from events
        ready_events = [e for e in plane.events.of_kind("op_ready") if e["op"] == "n03"]
        done_events = {
            e["op"]: e["t"] for e in plane.events.of_kind("op_completed")
        }
        assert len(ready_events) == 1
        assert ready_events[0]["t"] >= max(done_events["n01"], done_events["n02"])

    def test_duplicate_completion_completes_consumers_once(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        w0 = b.add_worker("w-000")
        w1 = b.add_worker("w-001")
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {"n00": inference_node(ext)}))
        (group,) = b.plane.groups.values()
        member = group.representative
        # simulate two racing executions of the same logical operator
        group.state = "running"
        b.plane.running_groups.add(group.key)
        b.plane._pool_remove(group)
        group.assignments = {"w-000": 0.0, "w-001": 0.0}
        b.plane.worker_members["w-000"].add(member)
        b.plane.worker_members["w-001"].add(member)
        out = b.plane.cas.put(synth_output(group.identity, 64))
        assert b.plane.on_completion("w-000", member, out, 5.0) == "completed"
        assert b.plane.on_completion("w-001", member, out, 6.0) == "duplicate"
        completions = [e for e in b.plane.events.of_kind("op_completed")]
        assert len(completions) == 1


class TestWorkerFailure:
    def _running_plane(self, tmp_path, n_ops=5):
        b = PlaneBuilder(tmp_path, perf=simple_perf(per_item_mem_gib=0))
        b.add_worker("w-000")
        for i in range(n_ops):
            ext = b.external(f"p-{i}".encode())
            submit_doc(b.plane, workflow_doc(f"wf-{i}", {"n00": inference_node(ext)}))
        for d in b.plane.schedule_step(0.0):
            b.plane.admit(d, 0.0)
        return b

    def test_inflight_ops_return_to_ready(self, tmp_path):
        b = self._running_plane(tmp_path, n_ops=5)
        running = [k for k, i in b.plane.instances.items() if i.state is OpState.RUNNING]
        assert len(running) == 5
        requeued = b.plane.on_worker_failure("w-000", 30.0)
        assert len(requeued) == 5  # conservation: nothing lost
        for key in running:
            inst = b.plane.instances[key]
            assert inst.state is OpState.READY
            assert inst.attempt_count == 1

    def test_failure_with_published_output_completes_from_cache(self, tmp_path):
        b = self._running_plane(tmp_path, n_ops=1)
        (group,) = [g for g in b.plane.groups.values() if g.state == "running"]
        out = b.plane.cas.put(synth_output(group.identity, 64))
        from flowmesh.cas import LineageEdge

        # a replica on another system published first
        b.plane.cas.publish(group.identity, out, LineageEdge(
            workflow_id="other", operator_id="n00", task_identity=group.identity,
            consumed=(), produced=out, executed_by="w-external", completed_at=1.0))
        b.plane.on_worker_failure("w-000", 30.0)
        inst = b.plane.instances[("wf-0", "n00")]
        assert inst.state is OpState.COMPLETED
        assert b.plane.events.of_kind("op_completed")[0]["via"] == "cache"

    def test_double_failure_report_raises(self, tmp_path):
        b = self._running_plane(tmp_path, n_ops=1)
        b.plane.on_worker_failure("w-000", 30.0)
        with pytest.raises(UnknownWorker):
            b.plane.on_worker_failure("w-000", 31.0)


class TestWatchdog:
    def test_detection_window(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker()
        worker.last_heartbeat = 120.0
        for t in range(121, 151):
            assert b.plane.watchdog_tick(float(t)) == []
        assert b.plane.watchdog_tick(151.0) == ["w-000"]
        det = b.plane.detections[0]
        assert det["silenced_at"] == 120.0
        assert 150.0 <= det["detected_at"] <= 151.0

    def test_heartbeat_exactly_at_deadline_not_failed(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker()
        worker.last_heartbeat = 120.0
        assert b.plane.watchdog_tick(150.0) == []  # strict inequality

    def test_healthy_fleet_empty_list(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        worker = b.add_worker()
        worker.last_heartbeat = 10.0
        assert b.plane.watchdog_tick(15.0) == []


class TestResourceMisfit:
    def _misfit_plane(self, tmp_path, big_worker=True):
        # true footprint 30 GiB; the workflow hints 10 GiB so placement
        # lands on the 24 GiB worker first
        perf = simple_perf(footprint_gib=30, per_item_mem_gib=0, load=2.0)
        b = PlaneBuilder(tmp_path, perf=perf)
        b.add_worker("w-000", rclass=ResourceClass.RTX4090_24G, cost_rate=0.3)
        if big_worker:
            b.add_worker("w-001", rclass=ResourceClass.RTX4090_48G, cost_rate=0.6)
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-1", {
            "n00": inference_node(ext, params={"mem_bytes": 10 * GiB},
                                  rclass="class_4090_24g"),
        }))
        return b

    def test_misfit_reschedules_to_capable_worker(self, tmp_path):
        b = self._misfit_plane(tmp_path)
        pump(b.plane)
        assert b.plane.workflows["wf-1"].completed_at is not None
        misfits = b.plane.events.of_kind("misfit_reported")
        assert len(misfits) == 1
        assert misfits[0]["worker"] == "w-000"
        completed = b.plane.events.of_kind("op_completed")
        assert completed[0]["worker"] == "w-001"
        # misfit report precedes the successful completion
        assert misfits[0]["seq"] < completed[0]["seq"]

    def test_corrected_requirement_persists(self, tmp_path):
        b = self._misfit_plane(tmp_path)
        report = MisfitReport("w-000", ("wf-1", "n00"), 30 * GiB)
        # force the group into a running state to apply the report
        (group,) = b.plane.groups.values()
        group.state = "running"
        group.assignments["w-000"] = 0.0
        b.plane._pool_remove(group)
        b.plane.handle_resource_misfit(report, 5.0)
        inst = b.plane.instances[("wf-1", "n00")]
        assert inst.corrected_mem == int(30 * GiB * 1.1)
        small = b.plane.workers["w-000"]
        assert not b.plane.feasible(small, [group])

    def test_no_capable_worker_fails_workflow(self, tmp_path):
        b = self._misfit_plane(tmp_path, big_worker=False)
        b.plane.templates = []  # nothing provisionable either
        (group,) = b.plane.groups.values()
        group.state = "running"
        group.assignments["w-000"] = 0.0
        b.plane._pool_remove(group)
        with pytest.raises(NoCapableWorker):
            b.plane.handle_resource_misfit(
                MisfitReport("w-000", ("wf-1", "n00"), 30 * GiB), 5.0)
        assert b.plane.workflows["wf-1"].failed == "NoCapableWorker"


class TestAutoscale:
    def test_burst_provisions_within_two_ticks(self, tmp_path):
        b = PlaneBuilder(tmp_path, perf=simple_perf(per_item_mem_gib=0),
                         templates=[WORKER_TEMPLATES[ResourceClass.RTX4090_48G]])
        b.add_worker()
        limits = b.limits
        limits.max_batch["inference" if False else list(limits.max_batch)[0]] = 24
        for i in range(50):
            ext = b.external(f"p-{i}".encode())
            submit_doc(b.plane, workflow_doc(f"wf-{i:02d}", {"n00": inference_node(ext)}))
        prov1, _ = b.plane.autoscale_tick(1.0)
        assert prov1 == []  # threshold must persist one full tick
        prov2, _ = b.plane.autoscale_tick(2.0)
        assert len(prov2) == 1
        new = b.plane.workers[prov2[0]]
        assert new.usable_at == 2.0 + limits.warmup_s

    def test_idle_fleet_retires_to_floor(self, tmp_path):
        b = PlaneBuilder(tmp_path)
        for i in range(4):
            b.add_worker(f"w-{i:03d}", cost_rate=1.0 + i)
        for w in b.plane.workers.values():
            w.idle_since = 0.0
        _, retired = b.plane.autoscale_tick(61.0)
        assert len(retired) == 3  # floor of one survives
        # most expensive first
        assert retired == ["w-003", "w-002", "w-001"]

    def test_elasticity_off_never_scales(self, tmp_path):
        b = PlaneBuilder(tmp_path, ablation=Ablation(elasticity=False))
        b.add_worker()
        for w in b.plane.workers.values():
            w.idle_since = 0.0
        assert b.plane.autoscale_tick(500.0) == ([], [])


class TestSpeculation:
    def _straggler_plane(self, tmp_path):
        b = PlaneBuilder(tmp_path, limits=SimLimits(speculation_min_samples=5),
                         perf=simple_perf(per_item_mem_gib=0))
        b.add_worker("w-000")
        b.add_worker("w-001")
        ext = b.external(b"d")
        submit_doc(b.plane, workflow_doc("wf-s", {"n00": inference_node(ext)}))
        (group,) = b.plane.groups.values()
        group.state = "running"
        b.plane.running_groups.add(group.key)
        b.plane._pool_remove(group)
        group.assignments["w-000"] = 0.0
        b.plane.worker_members["w-000"].add(group.representative)
        for key in group.consumers:
            b.plane.instances[key].state = OpState.RUNNING
        b.plane.duration_samples[group.signature.digest] = [1.0] * 5  # p95 = 1 s
        return b, group

    def test_straggler_gets_one_replica(self, tmp_path):
        b, group = self._straggler_plane(tmp_path)
        launches = b.plane.speculate(3.0)  # elapsed 3 > 2 * p95
        assert len(launches) == 1
        assert launches[0].is_replica
        assert launches[0].worker_id == "w-001"
        assert b.plane.speculate(4.0) == []  # capped at one replica

    def test_below_threshold_no_replica(self, tmp_path):
        b, group = self._straggler_plane(tmp_path)
        assert b.plane.speculate(1.5) == []

    def test_replica_race_single_winner(self, tmp_path):
        b, group = self._straggler_plane(tmp_path)
        (launch,) = b.plane.speculate(3.0)
        b.plane.admit(launch, 3.0)
        out = b.plane.cas.put(synth_output(group.identity, 64))
        member = group.representative
        assert b.plane.on_completion("w-001", member, out, 4.0) == "completed"
        assert b.plane.on_completion("w-000", member, out, 5.0) == "duplicate"
        won = [e for e in b.plane.events.of_kind("publish") if e["outcome"] == "won"]
        assert len(won) == 1
        assert len(b.plane.events.of_kind("op_completed")) == 1
