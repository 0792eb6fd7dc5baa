"""Operator semantics against sequential oracles, on 1, 2 and 4 executors.

The broad randomized suite lives in test_acceptance; these tests pin the
documented behavior of each operator including its edge and error cases.
"""

import json
import math
import os
import random

import pytest

from ignis import ISource
from ignis.errors import (
    EmptyDataframeError,
    IgnisIoError,
    NonPairElementError,
    SameWorkerError,
    UserFnError,
)

PS = [1, 2, 4]


def frames(workers, data, partitions=4):
    for p in PS:
        yield p, workers[p].parallelize(data, partitions)


# -- conversion ----------------------------------------------------------------------


def test_map(workers):
    for p, df in frames(workers, [1, 2, 3]):
        assert df.map("lambda x: x + 1").collect() == [2, 3, 4]


def test_map_empty(workers):
    for p, df in frames(workers, []):
        assert df.map("lambda x: x + 1").collect() == []


def test_map_identity_lambda(workers):
    data = [1, "two", (3, [4.0])]
    for p, df in frames(workers, data):
        assert df.map("lambda x: x").collect() == data


def test_map_registry_and_module_fn_equal_lambda(workers):
    import udfs

    data = list(range(20))
    for p, df in frames(workers, data):
        via_lambda = df.map("lambda x: x * 2").collect()
        via_registry = df.map("t.double").collect()
        via_module = df.map(udfs.double).collect()
        assert via_lambda == via_registry == via_module == [x * 2 for x in data]


def test_map_with_captured_variable(workers):
    for p, df in frames(workers, [1, 2, 3]):
        got = df.map(ISource("t.scaled", factor=10)).collect()
        assert got == [10, 20, 30]
        got = df.map(ISource("lambda x: $k * x", k=3)).collect()
        assert got == [3, 6, 9]


def test_map_user_error_carries_position(workers):
    df = workers[2].parallelize([1, 2, 3], 2)
    with pytest.raises(UserFnError):
        df.map("t.explode").collect()


def test_filter(workers):
    for p, df in frames(workers, [1, 2, 3, 4]):
        assert df.filter("lambda x: x % 2 == 0").collect() == [2, 4]
        assert df.filter("lambda x: true").collect() == [1, 2, 3, 4]
        assert df.filter("lambda x: false").collect() == []


def test_filter_non_bool_is_error(workers):
    df = workers[2].parallelize([1, 2], 2)
    with pytest.raises(UserFnError):
        df.filter("lambda x: x + 1").collect()


def test_flatmap(workers):
    for p, df in frames(workers, ["a b", "c"]):
        assert df.flatmap("wl.split_words").collect() == ["a", "b", "c"]


def test_flatmap_singleton_equals_map(workers):
    data = list(range(10))
    for p, df in frames(workers, data):
        assert df.flatmap("lambda x: [x * 2]").collect() == \
            df.map("lambda x: x * 2").collect()


def test_flatmap_empty_list(workers):
    for p, df in frames(workers, [1, 2, 3]):
        assert df.flatmap("lambda x: []").collect() == []


def test_keyby_and_projections(workers):
    data = ["aa", "b"]
    for p, df in frames(workers, data):
        assert df.keyBy("lambda x: len x").collect() == [(2, "aa"), (1, "b")]
        assert df.keyBy("lambda x: len x").values().collect() == data
        assert df.keyBy("lambda x: len x").keys().collect() == [2, 1]


def test_mapvalues(workers):
    for p, df in frames(workers, [("a", 1), ("b", 2)]):
        assert df.mapValues("lambda v: v * 10").collect() == [("a", 10), ("b", 20)]


def test_pair_views_require_pairs(workers):
    df = workers[2].parallelize([1, 2], 2)
    with pytest.raises(NonPairElementError):
        df.keys().collect()
    with pytest.raises(NonPairElementError):
        df.mapValues("lambda v: v").collect()


def test_mappartitions_reverse_twice_is_identity(workers):
    data = list(range(17))
    for p, df in frames(workers, data):
        once = df.mapPartitions("t.reverse_partition")
        twice = once.mapPartitions("t.reverse_partition")
        assert twice.collect() == data


# -- grouping -------------------------------------------------------------------------


def test_group_by_key(workers):
    data = [("a", 1), ("b", 2), ("a", 3)]
    for p, df in frames(workers, data):
        got = {k: sorted(v) for k, v in df.groupByKey().collect()}
        assert got == {"a": [1, 3], "b": [2]}


def test_group_by_key_distinct_keys_singletons(workers):
    data = [(i, i * 10) for i in range(12)]
    for p, df in frames(workers, data):
        got = dict(df.groupByKey().collect())
        assert got == {i: [i * 10] for i in range(12)}


def test_group_by_key_empty(workers):
    for p, df in frames(workers, []):
        assert df.groupByKey().collect() == []


def test_group_by_key_non_pair(workers):
    with pytest.raises(NonPairElementError):
        workers[2].parallelize([1], 1).groupByKey().collect()


def test_group_by(workers):
    data = list(range(10))
    for p, df in frames(workers, data):
        got = {k: sorted(v) for k, v in df.groupBy("lambda x: x % 3").collect()}
        assert got == {0: [0, 3, 6, 9], 1: [1, 4, 7], 2: [2, 5, 8]}


def test_reduce_by_key_wordcount(workers):
    data = [("a", 1), ("b", 1), ("a", 1)]
    for p, df in frames(workers, data):
        got = sorted(df.reduceByKey("lambda a, b: a + b").collect())
        assert got == [("a", 2), ("b", 1)]


def test_reduce_by_key_unique_keys_identity_on_values(workers):
    data = [(i, i * i) for i in range(9)]
    for p, df in frames(workers, data):
        assert sorted(df.reduceByKey("t.add").collect()) == data


def test_aggregate_by_key(workers):
    data = [("a", 1), ("a", 2), ("b", 5)]
    for p, df in frames(workers, data):
        got = sorted(df.aggregateByKey(0, "lambda acc, v: acc + 1", "t.add").collect())
        assert got == [("a", 2), ("b", 1)]  # per-key counts


def test_count_by_key_and_value(workers):
    pairs = [("a", 1), ("a", 2), ("b", 1)]
    for p, df in frames(workers, pairs):
        assert sorted(df.countByKey().collect()) == [("a", 2), ("b", 1)]
    for p, df in frames(workers, [1, 1, 2]):
        assert sorted(df.countByValue().collect()) == [(1, 2), (2, 1)]


# -- sorting -------------------------------------------------------------------------


def test_sort_random_ints(workers):
    rng = random.Random(31)
    data = [rng.randrange(-10**6, 10**6) for _ in range(10_000)]
    for p, df in frames(workers, data, partitions=8):
        assert df.sort().collect() == sorted(data)


def test_sort_already_sorted(workers):
    data = list(range(100))
    for p, df in frames(workers, data):
        assert df.sort().collect() == data


def test_sort_descending_and_sort_by_key(workers):
    data = [("b", 2), ("a", 1), ("c", 3)]
    for p, df in frames(workers, data):
        assert df.sortByKey().collect() == sorted(data)
        assert df.sortByKey(ascending=False).collect() == sorted(data, reverse=True)
    nums = [5, 1, 9]
    for p, df in frames(workers, nums):
        assert df.sortBy("lambda x: -x").collect() == [9, 5, 1]


# -- reductions -----------------------------------------------------------------------


def test_reduce_sum_1_to_100(workers):
    data = list(range(1, 101))
    for p, df in frames(workers, data, partitions=8):
        assert df.reduce("t.add") == 5050


def test_reduce_single_element(workers):
    for p, df in frames(workers, [42]):
        assert df.reduce("t.add") == 42


def test_reduce_flat_vs_tree(workers):
    data = list(range(1, 50))
    for p, df in frames(workers, data):
        assert df.reduce("t.add") == df.treeReduce("t.add") == sum(data)


def test_reduce_empty_is_error(workers):
    with pytest.raises(EmptyDataframeError):
        workers[2].parallelize([], 2).reduce("t.add")


def test_aggregate(workers):
    for p, df in frames(workers, [1, 2, 3]):
        assert df.aggregate(0, "lambda acc, x: acc + x * x", "t.add") == 14
    # empty dataframe folds to the zero element (zero must be comb's identity)
    for p, df in frames(workers, []):
        assert df.aggregate(0, "t.add", "t.add") == 0
        assert df.aggregate([], "lambda acc, x: acc", "lambda a, b: a") == []


def test_count_via_aggregate_equals_count(workers):
    data = list(range(23))
    for p, df in frames(workers, data, partitions=5):
        via_aggregate = df.aggregate(0, "lambda acc, x: acc + 1", "t.add")
        assert via_aggregate == df.count() == 23


def test_fold(workers):
    data = [1, 2, 3, 4]
    for p, df in frames(workers, data):
        assert df.fold(0, "t.add") == 10


def test_tree_aggregate(workers):
    data = list(range(40))
    for p, df in frames(workers, data):
        assert df.treeAggregate(0, "t.add", "t.add") == sum(data)


# -- sql ------------------------------------------------------------------------------


def test_join(workers):
    for p in PS:
        a = workers[p].parallelize([("x", 1)], 2)
        b = workers[p].parallelize([("x", 2), ("y", 3)], 2)
        assert a.join(b).collect() == [("x", (1, 2))]


def test_join_oracle_nested_loop(workers):
    rng = random.Random(5)
    left = [(rng.randrange(8), rng.randrange(100)) for _ in range(40)]
    right = [(rng.randrange(8), rng.randrange(100)) for _ in range(30)]
    oracle = sorted((k, (v, w)) for k, v in left for k2, w in right if k == k2)
    for p in PS:
        a = workers[p].parallelize(left, 4)
        b = workers[p].parallelize(right, 4)
        assert sorted(a.join(b).collect()) == oracle


def test_join_non_pair(workers):
    a = workers[2].parallelize([1], 1)
    b = workers[2].parallelize([("x", 1)], 1)
    with pytest.raises(NonPairElementError):
        a.join(b).collect()


def test_union_with_empty_is_identity(workers):
    data = [3, 1, 2]
    for p in PS:
        df = workers[p].parallelize(data, 2)
        empty = workers[p].parallelize([], 2)
        assert sorted(df.union(empty).collect()) == sorted(data)
        assert df.union(empty).count() == 3


def test_union_is_multiset_concat(workers):
    for p in PS:
        a = workers[p].parallelize([1, 2], 2)
        b = workers[p].parallelize([2, 3], 2)
        assert sorted(a.union(b).collect()) == [1, 2, 2, 3]


def test_distinct(workers):
    for p, df in frames(workers, [1, 1, 2]):
        assert sorted(df.distinct().collect()) == [1, 2]


def test_distinct_set_oracle(workers):
    rng = random.Random(77)
    data = [rng.randrange(30) for _ in range(200)]
    for p, df in frames(workers, data, partitions=6):
        assert sorted(df.distinct().collect()) == sorted(set(data))


def test_distinct_uses_structural_identity(workers):
    data = [True, 1, 1.0, (1, 2), [1, 2], [1, 2]]
    for p, df in frames(workers, data):
        got = df.distinct().collect()
        assert len(got) == 5  # True, 1, 1.0 and the pair/list all distinct


# -- math ------------------------------------------------------------------------------


def test_count_sums_partitions(workers):
    data = list(range(7))
    for p, df in frames(workers, data, partitions=3):
        assert df.count() == 7


def test_sample_fraction_one_keeps_everything(workers):
    data = list(range(30))
    for p, df in frames(workers, data):
        assert df.sample(False, 1.0, 1).collect() == data


def test_sample_deterministic_by_seed(workers):
    data = list(range(200))
    for p, df in frames(workers, data):
        a = df.sample(False, 0.5, 42).collect()
        b = df.sample(False, 0.5, 42).collect()
        assert a == b
        c = df.sample(False, 0.5, 43).collect()
        assert a != c  # overwhelmingly likely


def test_sample_with_replacement_deterministic(workers):
    data = list(range(100))
    for p, df in frames(workers, data):
        a = df.sample(True, 1.5, 7).collect()
        assert a == df.sample(True, 1.5, 7).collect()
        assert set(a) <= set(data)


def test_sample_by_key(workers):
    data = [("a", i) for i in range(50)] + [("b", i) for i in range(50)]
    for p, df in frames(workers, data):
        got = df.sampleByKey({"a": 1.0, "b": 0.0}, seed=3).collect()
        assert sorted(v for k, v in got if k == "a") == list(range(50))
        assert all(k != "b" for k, _ in got)


def test_take_sample(workers):
    data = list(range(100))
    for p, df in frames(workers, data):
        got = df.takeSample(10, 5)
        assert len(got) == 10 and len(set(got)) == 10
        assert set(got) <= set(data)
        assert got == df.takeSample(10, 5)


def test_max_min(workers):
    for p, df in frames(workers, [4, 9, 2]):
        assert df.max() == 9
        assert df.min() == 2
        assert df.max("lambda x: -x") == 2  # greatest by image
    with pytest.raises(EmptyDataframeError):
        workers[2].parallelize([], 2).max()


# -- balancing -----------------------------------------------------------------------


def test_repartition_sizes_block_round_robin(workers, tmp_path):
    df = workers[4].parallelize(list(range(10)), 3).repartition(4)
    out = tmp_path / "rep4"
    df.saveAsTextFile(str(out))
    sizes = sorted(
        len(f.read_text().splitlines()) for f in out.glob("part-*") )
    assert sizes == [2, 2, 3, 3]
    assert sorted(int(x) for f in out.glob("part-*")
                  for x in f.read_text().splitlines()) == list(range(10))


def test_repartition_single_partition(workers):
    data = list(range(10))
    for p, df in frames(workers, data, partitions=4):
        got = df.repartition(1)
        assert sorted(got.collect()) == data


def test_partition_by_then_group_needs_no_exchange(workers):
    w = workers[4]
    data = [(i % 7, i) for i in range(56)]
    routed = w.parallelize(data, 4).partitionBy("builtin.pair_key", 4).cache()
    routed.count()  # materialize the routed (and now cached) layout
    mid = sum(m["exchange_messages"] for m in w.executorMetrics())
    got = {k: sorted(v) for k, v in routed.groupByKey().collect()}
    after = sum(m["exchange_messages"] for m in w.executorMetrics())
    oracle = {}
    for k, v in data:
        oracle.setdefault(k, []).append(v)
    assert got == {k: sorted(v) for k, v in oracle.items()}
    assert after == mid  # the grouping phase exchanged nothing
    routed.unpersist()


def test_partition_by_preserves_multiset(workers):
    data = [(i % 5, i) for i in range(31)]
    for p, df in frames(workers, data, partitions=3):
        assert sorted(df.partitionBy("builtin.pair_key", 5).collect()) == sorted(data)


# -- retrieval ------------------------------------------------------------------------


def test_collect_roundtrip_order(workers):
    data = [9, 1, (2, "x"), None, 3.5]
    for p, df in frames(workers, data, partitions=3):
        assert df.collect() == data


def test_take(workers):
    data = list(range(10))
    for p, df in frames(workers, data, partitions=4):
        assert df.take(0) == []
        assert df.take(3) == [0, 1, 2]
        assert df.take(100) == data


def test_top(workers):
    for p, df in frames(workers, [5, 1, 9, 3]):
        assert df.top(2) == [9, 5]
        assert df.top(10) == [9, 5, 3, 1]


# -- io -------------------------------------------------------------------------------


def test_textfile_covers_every_line_once(workers, tmp_path):
    path = tmp_path / "six.txt"
    lines = [f"line-{i}" for i in range(6)]
    path.write_text("\n".join(lines) + "\n")
    for p in PS:
        got = workers[p].textFile(str(path), minPartitions=3).collect()
        assert sorted(got) == sorted(lines)


def test_textfile_split_boundaries(workers, tmp_path):
    rng = random.Random(13)
    lines = ["x" * rng.randrange(0, 40) for _ in range(101)]
    path = tmp_path / "odd.txt"
    path.write_text("\n".join(lines) + "\n")
    for parts in (1, 2, 7, 13):
        got = workers[4].textFile(str(path), minPartitions=parts).collect()
        assert got == lines


def test_save_text_roundtrip(workers, tmp_path):
    lines = [f"row {i}" for i in range(25)]
    df = workers[4].parallelize(lines, 5)
    out = tmp_path / "text-out"
    df.saveAsTextFile(str(out))
    files = sorted(out.glob("part-*.txt"))
    assert len(files) == 5
    back = [l for f in files for l in f.read_text().splitlines()]
    assert sorted(back) == sorted(lines)
    again = workers[4].textFile(str(files[0]), minPartitions=1).collect()
    assert again == lines[:5]


def test_save_json_and_read_back(workers, tmp_path):
    data = [1, "s", None, True, 2.5, (1, "p"), [1, [2]], b"\x01"]
    df = workers[2].parallelize(data, 2)
    out = tmp_path / "json-out"
    df.saveAsJsonFile(str(out))
    files = sorted(out.glob("part-*.json"))
    payload = [x for f in files for x in json.loads(f.read_text())]
    assert payload == [1, "s", None, True, 2.5, [1, "p"], [1, [2]], "AQ=="]
    back = workers[2].partitionJsonFile(str(out)).collect()
    # arrays come back as List and bytes as their base64 Str, by contract
    assert back == [1, "s", None, True, 2.5, [1, "p"], [1, [2]], "AQ=="]


def test_save_json_rejects_nan(workers, tmp_path):
    df = workers[2].parallelize([float("nan")], 1)
    with pytest.raises(IgnisIoError):
        df.saveAsJsonFile(str(tmp_path / "nan-out"))


def test_save_object_roundtrip_exact(workers, tmp_path):
    data = [1, "s", None, True, 2.5, (1, "p"), [1, [2]], b"\x01", float("inf")]
    df = workers[4].parallelize(data, 3)
    out = tmp_path / "obj-out"
    df.saveAsObjectFile(str(out))
    back = workers[4].partitionObjectFile(str(out)).collect()
    assert back == data


# -- importData -----------------------------------------------------------------------


def test_import_data_rebalances(session, cluster, workers):
    src = workers[4]
    dst = cluster.createWorker("imp2", instances=2)
    data = list(range(64))
    df = src.parallelize(data, 8)
    moved = dst.importData(df)
    assert sorted(moved.collect()) == data
    assert moved.count() == 64


def test_import_data_empty(cluster, workers):
    src = workers[2]
    dst = cluster.createWorker("imp1", instances=1)
    moved = dst.importData(src.parallelize([], 4))
    assert moved.collect() == []


def test_import_data_same_worker_rejected(workers):
    df = workers[2].parallelize([1], 1)
    with pytest.raises(SameWorkerError):
        workers[2].importData(df).collect()


# -- call / voidCall --------------------------------------------------------------------


def test_call_emits_ranks(workers):
    got = workers[4].call("t.emit_rank").collect()
    assert sorted(got) == [0, 1, 2, 3]


def test_call_with_collective(workers):
    got = workers[4].call("t.rank_sum").collect()
    assert got == [6, 6, 6, 6]  # allreduce of 0+1+2+3 at every executor


def test_void_call_barrier(workers):
    assert workers[4].voidCall("t.barrier_only") is None


def test_call_unknown_function(workers):
    from ignis.errors import UnknownFunctionError

    with pytest.raises(UnknownFunctionError):
        workers[2].call("no.such.function").collect()


def test_executor_count_invariance(workers):
    rng = random.Random(3)
    ints = [rng.randrange(100) for _ in range(97)]
    pairs = [(rng.randrange(9), rng.randrange(50)) for _ in range(80)]
    counts = {p: workers[p].parallelize(ints, 6).count() for p in PS}
    sums = {p: workers[p].parallelize(ints, 6).reduce("t.add") for p in PS}
    dist = {p: sorted(workers[p].parallelize(ints, 6).distinct().collect()) for p in PS}
    rbk = {p: sorted(workers[p].parallelize(pairs, 6)
                     .reduceByKey("t.add").collect()) for p in PS}
    assert len(set(counts.values())) == 1
    assert len(set(sums.values())) == 1
    assert len({tuple(v) for v in dist.values()}) == 1
    assert len({tuple(v) for v in rbk.values()}) == 1
