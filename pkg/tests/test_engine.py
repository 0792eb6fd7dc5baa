"""Engine semantics: laziness, caching, pipeline fusion, lifecycle, hierarchy."""

import os
import subprocess
import sys
import time

import psutil
import pytest

from conftest import UDF_LIBRARY, engine_properties
from ignis import Ignis, ISource, Properties
from ignis.errors import (
    IgnisError,
    InvalidSessionError,
    PropertyError,
    ResultTooLargeError,
    UnknownDependencyError,
)


def stage_count(worker):
    return sum(m["stages"] for m in worker.executorMetrics())


def pass_count(worker):
    return sum(m["passes"] for m in worker.executorMetrics())


# -- laziness ---------------------------------------------------------------------


def test_recording_transforms_does_no_work(session, cluster):
    w = cluster.createWorker("lazy", instances=2)
    before = stage_count(w)
    df = w.parallelize(list(range(10)), 2)
    for _ in range(100):
        df = df.map("lambda x: x + 1")
    assert stage_count(w) == before  # nothing dispatched yet
    assert df.collect() == [x + 100 for x in range(10)]
    assert stage_count(w) > before


def test_unknown_dependency_rejected(session, workers):
    with pytest.raises(UnknownDependencyError):
        session.backend.record(workers[2].id, "transform", "map", (99999,))


def test_action_runs_only_needed_chain(session, workers):
    w = workers[2]
    df = w.parallelize([1, 2, 3], 2)
    a = df.map("lambda x: x + 1")
    b = df.map("lambda x: x * 2")  # never used by the action below
    assert a.collect() == [2, 3, 4]
    assert b._node.exec_count == 0


def test_two_actions_without_cache_recompute(session, workers):
    w = workers[2]
    t1 = w.parallelize(list(range(8)), 2).map("lambda x: x + 1")
    assert t1.count() == 8
    assert t1.count() == 8
    assert t1._node.exec_count == 2  # lazy: no implicit caching


def test_fig3_dag_shape(session, workers):
    # Action <- T3 <- {T1, T2}: every node runs exactly once per action
    w = workers[2]
    t1 = w.parallelize([(i, i) for i in range(10)], 2)
    t2 = w.parallelize([(i, i * i) for i in range(10)], 2)
    t3 = t1.join(t2)
    assert t3.count() == 10
    assert t1._node.exec_count == 1
    assert t2._node.exec_count == 1
    assert t3._node.exec_count == 1
    assert t3.count() == 10  # second action recomputes everything (uncached)
    assert t3._node.exec_count == 2
    assert t1._node.exec_count == 2


# -- caching ----------------------------------------------------------------------


def test_cache_then_two_counts_runs_once(session, workers):
    w = workers[4]
    df = w.parallelize(list(range(40)), 4).map("lambda x: x * 3").cache()
    assert df.count() == 40
    assert df.count() == 40
    assert df.collect() == [x * 3 for x in range(40)]
    assert df._node.exec_count == 1
    df.unpersist()


def test_unpersist_then_count_recomputes(session, workers):
    w = workers[2]
    df = w.parallelize(list(range(6)), 2).map("lambda x: x + 5").cache()
    assert df.count() == 6
    df.unpersist()
    assert df.count() == 6
    assert df._node.exec_count == 2


def test_uncache_is_idempotent(session, workers):
    df = workers[2].parallelize([1], 1).cache()
    df.uncache()
    df.uncache()
    assert df.count() == 1


def test_persist_tiers_and_disk(session, workers, tmp_path):
    from ignis.storage import StoreKind

    w = workers[2]
    df = w.parallelize(list(range(12)), 2).map("lambda x: x * 2")
    df.persist(StoreKind.disk(6, str(tmp_path)))
    assert df.count() == 12
    assert df._node.exec_count == 1
    assert any(f.name.startswith("ignis-part-") for f in tmp_path.iterdir())
    assert df.collect() == [x * 2 for x in range(12)]
    assert df._node.exec_count == 1
    df.unpersist()


def test_never_recompute_cached_across_action_sequence(session, workers):
    w = workers[4]
    x = w.parallelize(list(range(30)), 4).map("lambda v: v + 7").cache()
    for _ in range(5):
        assert x.count() == 30
        assert x.take(3) == [7, 8, 9]
    assert x._node.exec_count == 1
    x.unpersist()
    assert x.count() == 30
    assert x._node.exec_count == 2


# -- pipeline fusion -----------------------------------------------------------------


def test_map_filter_map_is_one_pass_per_partition(session, cluster):
    w = cluster.createWorker("fuse", instances=2)
    df = w.parallelize(list(range(20)), 4)
    chain = (df.map("lambda x: x + 1")
               .filter("lambda x: x % 2 == 0")
               .map("lambda x: x * 10"))
    before = pass_count(w)
    got = chain.collect()
    assert got == [x * 10 for x in range(1, 21) if x % 2 == 0]
    assert pass_count(w) - before == 4  # one pass per partition, nothing more


# -- graph dump -------------------------------------------------------------------------


def test_graph_dump_format(session, workers):
    w = workers[1]
    df = w.parallelize([1, 2], 1).map("lambda x: x")
    df.count()
    dump = session.graphDump()
    lines = [l for l in dump.strip().split("\n")]
    node_line = next(l for l in lines if f" map " in l)
    parts = node_line.split(" ")
    assert parts[1] == "transform" and parts[2] == "map"
    assert parts[-1] in ("0", "1")
    assert parts[-2] in ("Pending", "Running", "Done", "Failed")
    ids = [int(l.split(" ")[0]) for l in lines]
    assert ids == sorted(ids)


# -- session lifecycle ---------------------------------------------------------------------


def test_start_stop_clean_no_orphans():
    ignis = Ignis(engine_properties()).start()
    cluster = ignis.createCluster()
    w = cluster.createWorker("life", instances=2)
    pids = w.executorPids()
    assert len(pids) == 2
    for pid in pids:
        assert psutil.pid_exists(pid)
    procs = [ex.proc for ex in w.runtime.executors]
    ignis.stop()
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        if not any(psutil.pid_exists(p) and psutil.Process(p).is_running()
                   and psutil.Process(p).status() != psutil.STATUS_ZOMBIE
                   for p in pids):
            break
        time.sleep(0.1)
    for p in pids:
        assert not psutil.pid_exists(p) or \
            psutil.Process(p).status() == psutil.STATUS_ZOMBIE
    for proc in procs:
        assert proc.returncode == 0  # clean shutdown


def test_api_after_stop_is_invalid_session():
    ignis = Ignis(engine_properties()).start()
    ignis.stop()
    with pytest.raises(InvalidSessionError):
        ignis.createCluster()


def test_double_start_is_error():
    ignis = Ignis(engine_properties()).start()
    try:
        with pytest.raises(IgnisError):
            ignis.start()
    finally:
        ignis.stop()


def test_stop_is_idempotent():
    ignis = Ignis(engine_properties()).start()
    ignis.stop()
    ignis.stop()


def test_instances_property_controls_executor_count():
    props = engine_properties()
    props.set("ignis.executor.instances", "2")
    with Ignis(props) as ignis:
        w = ignis.createCluster().createWorker("insts")
        assert len(w.executorPids()) == 2
        assert w.runtime.base.size == 2


# -- job hierarchy ----------------------------------------------------------------------------


def test_two_workers_disjoint_base_comms(session, cluster):
    wa = cluster.createWorker("disj-a", instances=2)
    wb = cluster.createWorker("disj-b", instances=2)
    assert wa.runtime.base.comm_id != wb.runtime.base.comm_id
    a_idents = {m.ident for m in wa.runtime.base.members}
    b_idents = {m.ident for m in wb.runtime.base.members}
    assert a_idents.isdisjoint(b_idents)
    assert set(wa.executorPids()).isdisjoint(wb.executorPids())


def test_shared_worker_reuses_executor_slots(session):
    cluster = session.createCluster()  # fresh cluster so the donor is ours
    donor = cluster.createWorker("share-x", instances=2)
    shared = cluster.createWorker("share-y", instances=2, shared=True)
    assert donor.executorPids() == shared.executorPids()
    assert donor.runtime.base.comm_id != shared.runtime.base.comm_id
    donor.loadLibrary(UDF_LIBRARY)
    assert sorted(shared.call("t.emit_rank").collect()) == [0, 1]


# -- properties ----------------------------------------------------------------------------------


def test_property_defaults_and_overrides():
    props = Properties()
    assert props.get("ignis.partition.compression") == "6"
    props.set("ignis.partition.compression", "9")
    assert props.get_int("ignis.partition.compression") == 9
    assert props.get_bool("ignis.worker.shared") is False
    assert 31100 in props.ports()


def test_driver_keys_frozen_after_start():
    props = engine_properties()
    props.set("ignis.driver.resultCap", "1000000")  # fine before start
    with Ignis(props) as ignis:
        with pytest.raises(PropertyError):
            ignis.properties.set("ignis.driver.resultCap", "5")


def test_result_cap_enforced():
    props = engine_properties()
    props.set("ignis.driver.resultCap", "64")
    with Ignis(props) as ignis:
        w = ignis.createCluster().createWorker("cap", instances=1)
        df = w.parallelize(["x" * 64] * 10, 2)
        with pytest.raises(ResultTooLargeError):
            df.collect()


# -- executor-resident iteration --------------------------------------------------------------------


def test_iterate_fixed_iterations(session, workers):
    w = workers[2]
    df = w.parallelize(list(range(10)), 2)
    out = df.iterate("t.loop_body", iterations=5)
    assert sorted(out.collect()) == [x + 5 for x in range(10)]
    ran, scalars = out.iterateResult()
    assert ran == 5 and scalars == []


def test_iterate_zero_iterations_unchanged(session, workers):
    w = workers[2]
    data = list(range(12))
    df = w.parallelize(data, 3)
    out = df.iterate("t.loop_body", iterations=0)
    assert out.collect() == data
    assert out.iterateResult()[0] == 0


def test_iterate_convergence_matches_oracle(session, workers):
    w = workers[4]
    data = list(range(20))
    bound = 10
    df = w.parallelize(data, 4)
    out = df.iterate(ISource("t.loop_body"), convergence=ISource("t.loop_conv", bound=bound),
                     epsilon=0.0)
    got = sorted(out.collect())
    ran, scalars = out.iterateResult()
    # oracle: sequential simulation of the same loop
    elems = list(data)
    oracle_scalars = []
    while True:
        elems = [x + 1 for x in elems]
        oracle_scalars.append(float(sum(1 for x in elems if x < bound)))
        if oracle_scalars[-1] <= 0.0:
            break
    assert got == sorted(elems)
    assert scalars == oracle_scalars
    assert ran == len(oracle_scalars)


def test_iterate_executors_stay_resident(session, workers):
    w = workers[4]
    pids_before = set(w.executorPids())
    df = w.parallelize(list(range(8)), 4)
    out = df.iterate("t.loop_body", iterations=10)
    out.count()
    assert set(w.executorPids()) == pids_before


def test_iterate_nonconvergence_cap(session, cluster):
    props = engine_properties()
    w = cluster.createWorker("loopcap", instances=1)
    w.loadLibrary(UDF_LIBRARY)
    df = w.parallelize([0], 1)
    looped = df.iterate(ISource("t.loop_body"),
                        convergence=ISource("t.loop_conv", bound=10**9), epsilon=0.0)
    with pytest.raises(IgnisError):
        looped.collect()


def test_iterate_requires_termination_condition(session, workers):
    df = workers[2].parallelize([1], 1)
    with pytest.raises(IgnisError):
        df.iterate("t.loop_body")
